//! Deterministic software Z-buffer producing per-pixel metric depth and the
//! interface label of the nearest surface.
//!
//! Coverage is decided with fixed-point edge functions (8 sub-pixel bits) and
//! a top-left fill rule, so triangles sharing an edge never double-cover or
//! miss a pixel centre. Depth is the reciprocal of a screen-space affine
//! `1/z` plane evaluated at the pixel centre (perspective correct) and is kept
//! in meters. Triangles crossing the near plane are clipped in camera space;
//! the far plane is applied per pixel. No back-face culling, no anti-aliasing.
//!
//! Ties in depth are broken by label (free-occupied before free-unknown), so
//! the output does not depend on triangle submission order.

use nalgebra::Vector3;
use num_traits::Num;
use thiserror::Error;

use crate::geometry::{CameraModel, RigidTransform};
use crate::meshify::{InterfaceLabel, LabeledMesh};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("z-buffer value must lie in [0, 1]")]
    ZBufferRange,
    #[error("clip distances must satisfy 0 < z0 < z_inf")]
    ClipRange,
}

/// What a pixel's view ray hit first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum PixelLabel {
    FreeOccupied,
    FreeUnknown,
    UnknownOccupied,
    #[default]
    Background,
}

impl PixelLabel {
    pub const ALL: [PixelLabel; 4] = [
        PixelLabel::FreeOccupied,
        PixelLabel::FreeUnknown,
        PixelLabel::UnknownOccupied,
        PixelLabel::Background,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<InterfaceLabel> for PixelLabel {
    fn from(l: InterfaceLabel) -> Self {
        match l {
            InterfaceLabel::FreeOccupied => PixelLabel::FreeOccupied,
            InterfaceLabel::FreeUnknown => PixelLabel::FreeUnknown,
        }
    }
}

/// Depth in meters (`NaN` for background) and label of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedPixel<T> {
    pub depth: T,
    pub label: PixelLabel,
}

impl<T: Real> RenderedPixel<T> {
    pub fn background() -> Self {
        Self {
            depth: T::NAN,
            label: PixelLabel::Background,
        }
    }

    pub fn new(depth: T, label: PixelLabel) -> Self {
        Self { depth, label }
    }
}

/// Rendered Z-buffer with labels, stored as two row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRender<T> {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<T>,
    pub labels: Vec<PixelLabel>,
}

impl<T: Real> LabeledRender<T> {
    pub fn background(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![T::NAN; width * height],
            labels: vec![PixelLabel::Background; width * height],
        }
    }

    #[inline]
    pub fn pixel(&self, col: usize, row: usize) -> RenderedPixel<T> {
        let i = row * self.width + col;
        RenderedPixel {
            depth: self.depth[i],
            label: self.labels[i],
        }
    }

    #[inline]
    pub fn pixel_at(&self, index: usize) -> RenderedPixel<T> {
        RenderedPixel {
            depth: self.depth[index],
            label: self.labels[index],
        }
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn count(&self, label: PixelLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Bitwise equality, treating `NaN` depths as equal.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.labels == other.labels
            && self
                .depth
                .iter()
                .zip(&other.depth)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// False-color image: label picks the hue, depth the brightness.
    pub fn to_rgb(&self, z_far: T) -> image::RgbImage {
        let far = z_far.as_f64();
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |c, r| {
            let p = self.pixel(c as usize, r as usize);
            let shade = if p.depth.is_finite() {
                1.0 - 0.75 * (p.depth.as_f64() / far).clamp(0.0, 1.0)
            } else {
                1.0
            };
            let base: [f64; 3] = match p.label {
                PixelLabel::FreeOccupied => [200.0, 200.0, 200.0],
                PixelLabel::FreeUnknown => [40.0, 220.0, 40.0],
                PixelLabel::UnknownOccupied => [170.0, 60.0, 200.0],
                PixelLabel::Background => return image::Rgb([255, 255, 255]),
            };
            image::Rgb(base.map(|b| (b * shade).round() as u8))
        })
    }
}

/// A mesh placed in the world by `transform` (mesh frame → world).
#[derive(Debug, Clone, Copy)]
pub struct MeshInstance<'a, T: Real> {
    pub mesh: &'a LabeledMesh<T>,
    pub transform: RigidTransform<T>,
}

impl<'a, T: Real> MeshInstance<'a, T> {
    pub fn new(mesh: &'a LabeledMesh<T>, transform: RigidTransform<T>) -> Self {
        Self { mesh, transform }
    }

    pub fn at_origin(mesh: &'a LabeledMesh<T>) -> Self {
        Self::new(mesh, RigidTransform::identity())
    }
}

/// Sentinel in the primitive-id buffer.
pub const NO_PRIMITIVE: u32 = u32::MAX;

/// Render plus, per pixel, the global index of the winning triangle
/// (triangles of later meshes are offset by the triangle counts before them).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderWithIds<T> {
    pub render: LabeledRender<T>,
    pub ids: Vec<u32>,
}

/// Renders `meshes` seen from a camera at `camera_pose` (camera → world).
pub fn render<T: Real>(
    meshes: &[MeshInstance<'_, T>],
    cam: &CameraModel<T>,
    camera_pose: &RigidTransform<T>,
) -> LabeledRender<T> {
    let mut r = Rasterizer::new(cam, false);
    r.draw(meshes, camera_pose);
    r.finish().render
}

/// As [`render`], also returning the primitive-id buffer.
pub fn render_with_ids<T: Real>(
    meshes: &[MeshInstance<'_, T>],
    cam: &CameraModel<T>,
    camera_pose: &RigidTransform<T>,
) -> RenderWithIds<T> {
    let mut r = Rasterizer::new(cam, true);
    r.draw(meshes, camera_pose);
    r.finish()
}

/// Converts a normalized hardware depth-buffer value to perpendicular distance:
/// `Z = z0 / (1 − z_b·(1 − z0/z_inf))`.
pub fn zbuffer_to_depth<S>(z_b: S, z0: S, z_inf: S) -> Result<S, RasterError>
where
    S: Num + PartialOrd + Copy,
{
    if !(z_b >= S::zero() && z_b <= S::one()) {
        return Err(RasterError::ZBufferRange);
    }
    if !(z0 > S::zero() && z0 < z_inf) {
        return Err(RasterError::ClipRange);
    }
    Ok(z0 / (S::one() - z_b * (S::one() - z0 / z_inf)))
}

/// Inverse of [`zbuffer_to_depth`] for `z0 ≤ Z ≤ z_inf`.
pub fn depth_to_zbuffer<S>(depth: S, z0: S, z_inf: S) -> Result<S, RasterError>
where
    S: Num + PartialOrd + Copy,
{
    if !(z0 > S::zero() && z0 < z_inf) {
        return Err(RasterError::ClipRange);
    }
    if !(depth >= z0 && depth <= z_inf) {
        return Err(RasterError::ZBufferRange);
    }
    Ok((S::one() - z0 / depth) / (S::one() - z0 / z_inf))
}

const SUBPIXEL_BITS: u32 = 8;
const SUBPIXEL: i64 = 1 << SUBPIXEL_BITS;
/// Vertices farther than this many pixels outside the image go through the
/// clipper so fixed-point products stay far from overflow.
const GUARD_BAND: f64 = 4096.0;

#[inline]
fn label_rank(l: PixelLabel) -> u8 {
    l as u8
}

#[derive(Clone, Copy)]
struct ScreenVertex<T> {
    fx: i64,
    fy: i64,
    sx: T,
    sy: T,
    inv_z: T,
}

struct Rasterizer<'c, T: Real> {
    cam: &'c CameraModel<T>,
    depth: Vec<T>,
    rank: Vec<u8>,
    ids: Option<Vec<u32>>,
    guard_lo_x: T,
    guard_hi_x: T,
    guard_lo_y: T,
    guard_hi_y: T,
}

impl<'c, T: Real> Rasterizer<'c, T> {
    fn new(cam: &'c CameraModel<T>, with_ids: bool) -> Self {
        let n = cam.pixel_count();
        let g = T::lit(GUARD_BAND);
        Self {
            cam,
            depth: vec![T::INFINITY; n],
            rank: vec![label_rank(PixelLabel::Background); n],
            ids: with_ids.then(|| vec![NO_PRIMITIVE; n]),
            guard_lo_x: -g,
            guard_hi_x: T::from_usize(cam.width).unwrap() + g,
            guard_lo_y: -g,
            guard_hi_y: T::from_usize(cam.height).unwrap() + g,
        }
    }

    fn finish(self) -> RenderWithIds<T> {
        let labels = self
            .rank
            .iter()
            .map(|&r| PixelLabel::ALL[r as usize])
            .collect();
        let depth = self
            .depth
            .into_iter()
            .map(|d| if d.is_finite() { d } else { T::NAN })
            .collect();
        RenderWithIds {
            render: LabeledRender {
                width: self.cam.width,
                height: self.cam.height,
                depth,
                labels,
            },
            ids: self.ids.unwrap_or_default(),
        }
    }

    #[inline]
    fn in_guard(&self, sx: T, sy: T) -> bool {
        sx >= self.guard_lo_x && sx <= self.guard_hi_x && sy >= self.guard_lo_y && sy <= self.guard_hi_y
    }

    #[inline]
    fn screen_vertex(&self, p: &Vector3<T>) -> ScreenVertex<T> {
        let inv_z = T::one() / p.z;
        let sx = self.cam.fx * p.x * inv_z + self.cam.cx;
        let sy = self.cam.fy * p.y * inv_z + self.cam.cy;
        let scale = T::lit(SUBPIXEL as f64);
        ScreenVertex {
            fx: (sx * scale).round().to_i64().unwrap_or(0),
            fy: (sy * scale).round().to_i64().unwrap_or(0),
            sx,
            sy,
            inv_z,
        }
    }

    fn draw(&mut self, meshes: &[MeshInstance<'_, T>], camera_pose: &RigidTransform<T>) {
        let world_to_cam = camera_pose.inverse();
        let near = self.cam.z_near;
        let far = self.cam.z_far;
        let mut id_offset: u32 = 0;
        let mut cam_pts: Vec<Vector3<T>> = Vec::new();
        let mut screen: Vec<Option<ScreenVertex<T>>> = Vec::new();
        for inst in meshes {
            let to_cam = world_to_cam.compose(&inst.transform);
            cam_pts.clear();
            cam_pts.extend(inst.mesh.vertices.iter().map(|v| to_cam.transform_point(v)));
            screen.clear();
            screen.extend(cam_pts.iter().map(|p| {
                if p.z >= near {
                    let s = self.screen_vertex(p);
                    self.in_guard(s.sx, s.sy).then_some(s)
                } else {
                    None
                }
            }));
            for (ti, (tri, &label)) in inst.mesh.triangles.iter().zip(&inst.mesh.labels).enumerate() {
                let [a, b, c] = tri.map(|i| i as usize);
                let (za, zb, zc) = (cam_pts[a].z, cam_pts[b].z, cam_pts[c].z);
                if za > far && zb > far && zc > far {
                    continue;
                }
                if za < near && zb < near && zc < near {
                    continue;
                }
                let rank = label_rank(label.into());
                let id = id_offset + ti as u32;
                match (screen[a], screen[b], screen[c]) {
                    (Some(sa), Some(sb), Some(sc)) => self.raster_triangle(sa, sb, sc, rank, id),
                    _ => self.clip_and_raster([cam_pts[a], cam_pts[b], cam_pts[c]], rank, id),
                }
            }
            id_offset += inst.mesh.triangles.len() as u32;
        }
    }

    fn clip_and_raster(&mut self, tri: [Vector3<T>; 3], rank: u8, id: u32) {
        let cam = self.cam;
        // half-spaces n·p + d·z ≥ 0 (near plane uses an explicit offset)
        let planes: [(Vector3<T>, T); 5] = [
            (Vector3::new(T::zero(), T::zero(), T::one()), -cam.z_near),
            (Vector3::new(cam.fx, T::zero(), cam.cx - self.guard_lo_x), T::zero()),
            (Vector3::new(-cam.fx, T::zero(), self.guard_hi_x - cam.cx), T::zero()),
            (Vector3::new(T::zero(), cam.fy, cam.cy - self.guard_lo_y), T::zero()),
            (Vector3::new(T::zero(), -cam.fy, self.guard_hi_y - cam.cy), T::zero()),
        ];
        let mut poly: Vec<Vector3<T>> = tri.to_vec();
        let mut next: Vec<Vector3<T>> = Vec::with_capacity(8);
        for (n, d) in planes.iter() {
            next.clear();
            let dist = |p: &Vector3<T>| n.dot(p) + *d;
            for i in 0..poly.len() {
                let p = poly[i];
                let q = poly[(i + 1) % poly.len()];
                let (dp, dq) = (dist(&p), dist(&q));
                if dp >= T::zero() {
                    next.push(p);
                }
                if (dp >= T::zero()) != (dq >= T::zero()) {
                    let t = dp / (dp - dq);
                    next.push(p + (q - p) * t);
                }
            }
            std::mem::swap(&mut poly, &mut next);
            if poly.len() < 3 {
                return;
            }
        }
        let verts: Vec<ScreenVertex<T>> = poly
            .iter()
            .map(|p| {
                let mut p = *p;
                // intersection points may sit a rounding error in front of the plane
                if p.z < cam.z_near {
                    p.z = cam.z_near;
                }
                self.screen_vertex(&p)
            })
            .collect();
        for i in 1..verts.len() - 1 {
            self.raster_triangle(verts[0], verts[i], verts[i + 1], rank, id);
        }
    }

    fn raster_triangle(
        &mut self,
        v0: ScreenVertex<T>,
        mut v1: ScreenVertex<T>,
        mut v2: ScreenVertex<T>,
        rank: u8,
        id: u32,
    ) {
        let area = (v1.fx - v0.fx) * (v2.fy - v0.fy) - (v1.fy - v0.fy) * (v2.fx - v0.fx);
        if area == 0 {
            return;
        }
        if area < 0 {
            std::mem::swap(&mut v1, &mut v2);
        }

        let w = self.cam.width as i64;
        let h = self.cam.height as i64;
        let min_x = v0.fx.min(v1.fx).min(v2.fx);
        let max_x = v0.fx.max(v1.fx).max(v2.fx);
        let min_y = v0.fy.min(v1.fy).min(v2.fy);
        let max_y = v0.fy.max(v1.fy).max(v2.fy);
        let col0 = ceil_div(min_x, SUBPIXEL).max(0);
        let col1 = floor_div(max_x, SUBPIXEL).min(w - 1);
        let row0 = ceil_div(min_y, SUBPIXEL).max(0);
        let row1 = floor_div(max_y, SUBPIXEL).min(h - 1);
        if col0 > col1 || row0 > row1 {
            return;
        }

        // edge i is opposite vertex i; its function is positive inside
        let edges = [(v1, v2), (v2, v0), (v0, v1)];
        let mut step_x = [0i64; 3];
        let mut step_y = [0i64; 3];
        let mut row_start = [0i64; 3];
        let px0 = col0 * SUBPIXEL;
        let py0 = row0 * SUBPIXEL;
        for (k, (a, b)) in edges.iter().enumerate() {
            let dx = b.fx - a.fx;
            let dy = b.fy - a.fy;
            let top_left = dy < 0 || (dy == 0 && dx > 0);
            let bias = if top_left { 0 } else { -1 };
            row_start[k] = dx * (py0 - a.fy) - dy * (px0 - a.fx) + bias;
            step_x[k] = -dy * SUBPIXEL;
            step_y[k] = dx * SUBPIXEL;
        }

        // 1/z as an affine function of the unsnapped screen position
        let e1x = v1.sx - v0.sx;
        let e1y = v1.sy - v0.sy;
        let e2x = v2.sx - v0.sx;
        let e2y = v2.sy - v0.sy;
        let farea = e1x * e2y - e1y * e2x;
        let d1 = v1.inv_z - v0.inv_z;
        let d2 = v2.inv_z - v0.inv_z;
        let (dzdx, dzdy) = if farea.abs() > T::lit(1e-12) {
            ((d1 * e2y - d2 * e1y) / farea, (d2 * e1x - d1 * e2x) / farea)
        } else {
            (T::zero(), T::zero())
        };
        let iz_min = v0.inv_z.min(v1.inv_z).min(v2.inv_z);
        let iz_max = v0.inv_z.max(v1.inv_z).max(v2.inv_z);
        let near = self.cam.z_near;
        let far = self.cam.z_far;

        let width = self.cam.width;
        for row in row0..=row1 {
            let mut wv = row_start;
            let fy = T::from_i64(row).unwrap() - v0.sy;
            let base = v0.inv_z + dzdy * fy;
            let line = row as usize * width;
            for col in col0..=col1 {
                if (wv[0] | wv[1] | wv[2]) >= 0 {
                    let fx = T::from_i64(col).unwrap() - v0.sx;
                    let iz = (base + dzdx * fx).clamp(iz_min, iz_max);
                    let z = T::one() / iz;
                    if z >= near && z <= far {
                        let idx = line + col as usize;
                        let cur = self.depth[idx];
                        if z < cur || (z == cur && rank < self.rank[idx]) {
                            self.depth[idx] = z;
                            self.rank[idx] = rank;
                            if let Some(ids) = self.ids.as_mut() {
                                ids[idx] = id;
                            }
                        } else if z == cur && rank == self.rank[idx] {
                            if let Some(ids) = self.ids.as_mut() {
                                ids[idx] = ids[idx].min(id);
                            }
                        }
                    }
                }
                wv[0] += step_x[0];
                wv[1] += step_x[1];
                wv[2] += step_x[2];
            }
            row_start[0] += step_y[0];
            row_start[1] += step_y[1];
            row_start[2] += step_y[2];
        }
    }
}

#[inline]
fn floor_div(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

#[inline]
fn ceil_div(a: i64, b: i64) -> i64 {
    -(-a).div_euclid(b)
}

/// Exact per-pixel ray casting (Möller–Trumbore), used as the oracle for
/// [`render`]. Nearest hit wins; equal hits go to the lower triangle index.
pub fn raycast_reference<T: Real>(
    meshes: &[MeshInstance<'_, T>],
    cam: &CameraModel<T>,
    camera_pose: &RigidTransform<T>,
) -> LabeledRender<T> {
    let world_to_cam = camera_pose.inverse();
    let mut tris: Vec<([Vector3<T>; 3], PixelLabel)> = Vec::new();
    for inst in meshes {
        let m = world_to_cam.compose(&inst.transform);
        for (i, &l) in inst.mesh.labels.iter().enumerate() {
            let t = inst.mesh.triangle(i).map(|p| m.transform_point(&p));
            tris.push((t, l.into()));
        }
    }
    let mut out = LabeledRender::background(cam.width, cam.height);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let dir = cam.ray(T::from_usize(col).unwrap(), T::from_usize(row).unwrap());
            let mut best: Option<(T, PixelLabel)> = None;
            for (tri, label) in &tris {
                if let Some(t) = ray_triangle(&dir, tri) {
                    if t >= cam.z_near && t <= cam.z_far && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, *label));
                    }
                }
            }
            if let Some((t, l)) = best {
                let i = row * cam.width + col;
                out.depth[i] = t;
                out.labels[i] = l;
            }
        }
    }
    out
}

/// Möller–Trumbore for a ray from the origin; returns the ray parameter.
/// Edges and vertices count as hits.
pub fn ray_triangle<T: Real>(dir: &Vector3<T>, tri: &[Vector3<T>; 3]) -> Option<T> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < T::lit(1e-14) {
        return None;
    }
    let inv = T::one() / det;
    let s = -tri[0];
    let u = s.dot(&p) * inv;
    if u < T::zero() || u > T::one() {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < T::zero() || u + v > T::one() {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > T::zero()).then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshify::InterfaceLabel::{FreeOccupied as FO, FreeUnknown as FU};

    fn cam() -> CameraModel<f64> {
        CameraModel::<f64>::tum_fr3().resized(80, 60)
    }

    /// Fronto-parallel quad at depth `z`, large enough to cover the frustum.
    fn wall(z: f64, half: f64, label: InterfaceLabel) -> LabeledMesh<f64> {
        let mut m = LabeledMesh::new();
        let a = m.push_vertex(Vector3::new(-half, -half, z));
        let b = m.push_vertex(Vector3::new(half, -half, z));
        let c = m.push_vertex(Vector3::new(half, half, z));
        let d = m.push_vertex(Vector3::new(-half, half, z));
        m.push_triangle([a, b, c], label);
        m.push_triangle([a, c, d], label);
        m
    }

    #[test]
    fn empty_scene_is_background() {
        let r = render::<f64>(&[], &cam(), &RigidTransform::identity());
        assert_eq!(r.count(PixelLabel::Background), 80 * 60);
        assert!(r.depth.iter().all(|d| d.is_nan()));
    }

    #[test]
    fn full_frame_wall() {
        // the quad corners project far outside the image, so every pixel is covered
        let m = wall(2.0, 5.0, FO);
        let r = render(&[MeshInstance::at_origin(&m)], &cam(), &RigidTransform::identity());
        assert!(r.labels.iter().all(|&l| l == PixelLabel::FreeOccupied));
        assert!(r.depth.iter().all(|&d| (d - 2.0).abs() < 1e-12));
        let o = raycast_reference(&[MeshInstance::at_origin(&m)], &cam(), &RigidTransform::identity());
        assert_eq!(o.labels, r.labels);
    }

    #[test]
    fn nearer_surface_wins() {
        let near = wall(1.0, 5.0, FO);
        let far = wall(3.0, 5.0, FU);
        for order in [[&far, &near], [&near, &far]] {
            let inst: Vec<_> = order.iter().map(|m| MeshInstance::at_origin(*m)).collect();
            let r = render(&inst, &cam(), &RigidTransform::identity());
            assert!(r.labels.iter().all(|&l| l == PixelLabel::FreeOccupied));
            assert!(r.depth.iter().all(|&d| (d - 1.0).abs() < 1e-12));
            let o = raycast_reference(&inst, &cam(), &RigidTransform::identity());
            assert_eq!(o.labels, r.labels);
        }
    }

    #[test]
    fn shared_edges_cover_each_pixel_once() {
        // a fan of triangles around an interior point: every covered pixel is hit once
        let c = cam();
        let center = Vector3::new(0.013, -0.021, 2.0);
        let n = 7;
        let mut total = 0usize;
        let mut union = LabeledRender::<f64>::background(c.width, c.height);
        for k in 0..n {
            let a0 = k as f64 / n as f64 * std::f64::consts::TAU;
            let a1 = (k + 1) as f64 / n as f64 * std::f64::consts::TAU;
            let mut m = LabeledMesh::new();
            let i = m.push_vertex(center);
            m.push_vertex(center + Vector3::new(a0.cos(), a0.sin(), 0.0) * 0.6);
            m.push_vertex(center + Vector3::new(a1.cos(), a1.sin(), 0.0) * 0.6);
            m.push_triangle([i, i + 1, i + 2], FO);
            let r = render(&[MeshInstance::at_origin(&m)], &c, &RigidTransform::identity());
            for (idx, l) in r.labels.iter().enumerate() {
                if *l != PixelLabel::Background {
                    total += 1;
                    union.labels[idx] = *l;
                }
            }
        }
        assert_eq!(total, union.labels.len() - union.count(PixelLabel::Background));
    }

    #[test]
    fn near_plane_clipping() {
        // quad spanning from behind the camera to 3 m in front, like a floor
        let c = cam();
        let mut m = LabeledMesh::new();
        let a = m.push_vertex(Vector3::new(-2.0, 0.5, -1.0));
        let b = m.push_vertex(Vector3::new(2.0, 0.5, -1.0));
        let cc = m.push_vertex(Vector3::new(2.0, 0.5, 3.0));
        let d = m.push_vertex(Vector3::new(-2.0, 0.5, 3.0));
        m.push_triangle([a, b, cc], FO);
        m.push_triangle([a, cc, d], FO);
        let inst = [MeshInstance::at_origin(&m)];
        let r = render(&inst, &c, &RigidTransform::identity());
        let o = raycast_reference(&inst, &c, &RigidTransform::identity());
        let mut agree = 0;
        for i in 0..r.len() {
            if r.labels[i] == o.labels[i] {
                agree += 1;
            }
            if r.labels[i] != PixelLabel::Background && o.labels[i] != PixelLabel::Background {
                assert!((r.depth[i] - o.depth[i]).abs() < 1e-9);
            }
        }
        assert!(agree as f64 >= 0.97 * r.len() as f64);
        assert!(r.count(PixelLabel::FreeOccupied) > 0);
    }

    #[test]
    fn sub_pixel_triangle_covers_at_most_one_pixel() {
        let c = cam();
        let mut m = LabeledMesh::new();
        // around the centre of pixel (40, 30) at 2 m, ~0.2 px across
        let p = c.backproject(40.0, 30.0, 2.0);
        let s = 0.2 * 2.0 / c.fx;
        m.push_triangle_vertices(
            p + Vector3::new(-s, -s, 0.0),
            p + Vector3::new(s, -s, 0.0),
            p + Vector3::new(0.0, s, 0.0),
            FO,
        );
        let inst = [MeshInstance::at_origin(&m)];
        let r = render(&inst, &c, &RigidTransform::identity());
        assert_eq!(r.count(PixelLabel::FreeOccupied), 1);
        assert_eq!(r.pixel(40, 30).label, PixelLabel::FreeOccupied);
        let o = raycast_reference(&inst, &c, &RigidTransform::identity());
        assert!(o.count(PixelLabel::FreeOccupied) <= 1);
    }

    #[test]
    fn reference_tie_goes_to_lower_index() {
        // two triangles meeting exactly on the ray through pixel (40, 30)
        let c = cam();
        let p = c.backproject(40.0, 30.0, 2.0);
        let mut m = LabeledMesh::new();
        m.push_triangle_vertices(p, p + Vector3::new(0.5, -0.5, 0.0), p + Vector3::new(0.5, 0.5, 0.0), FU);
        m.push_triangle_vertices(p, p + Vector3::new(-0.5, 0.5, 0.0), p + Vector3::new(-0.5, -0.5, 0.0), FO);
        let o = raycast_reference(&[MeshInstance::at_origin(&m)], &c, &RigidTransform::identity());
        assert_eq!(o.pixel(40, 30).label, PixelLabel::FreeUnknown);
    }

    #[test]
    fn ids_identify_winning_triangle() {
        let near = wall(1.0, 5.0, FO);
        let far = wall(3.0, 5.0, FU);
        let out = render_with_ids(
            &[MeshInstance::at_origin(&far), MeshInstance::at_origin(&near)],
            &cam(),
            &RigidTransform::identity(),
        );
        assert!(out.ids.iter().all(|&i| i == 2 || i == 3));
    }

    #[test]
    fn zbuffer_conversion() {
        assert_eq!(zbuffer_to_depth(0.0f64, 0.5, 4.0).unwrap(), 0.5);
        assert_eq!(zbuffer_to_depth(1.0f64, 0.5, 4.0).unwrap(), 4.0);
        let z = zbuffer_to_depth(0.5f64, 0.5, 4.0).unwrap();
        assert!((z - 0.5 / (1.0 - 0.5 * 0.875)).abs() < 1e-15);
        assert!((z - 0.888_888_888_888_889).abs() < 1e-12);
        assert_eq!(zbuffer_to_depth(1.5, 0.5, 4.0), Err(RasterError::ZBufferRange));
        assert_eq!(zbuffer_to_depth(0.5, 4.0, 0.5), Err(RasterError::ClipRange));
        let back: f64 = depth_to_zbuffer(z, 0.5, 4.0).unwrap();
        assert!((back - 0.5).abs() < 1e-15);
    }

    #[test]
    fn false_color_dimensions() {
        let m = wall(2.0, 0.3, FU);
        let r = render(&[MeshInstance::at_origin(&m)], &cam(), &RigidTransform::identity());
        let img = r.to_rgb(10.0);
        assert_eq!(img.dimensions(), (80, 60));
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
        let centre = img.get_pixel(40, 30).0;
        assert!(centre[1] > centre[0]);
    }
}
