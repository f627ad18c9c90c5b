#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rendermap::geometry::CameraModel;
use rendermap::meshify::{InterfaceLabel, LabeledMesh};
use rendermap::raster::{LabeledRender, PixelLabel};

/// Up to `max_tris` random triangles in front of a camera at the origin.
/// Some cross the near plane or lie partly behind the camera; all stay well
/// inside the far plane.
pub fn random_scene(seed: u64, max_tris: usize) -> LabeledMesh<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_tris);
    let mut m = LabeledMesh::new();
    for _ in 0..n {
        let z: f64 = rng.random_range(0.3..8.0);
        let c = Vector3::new(
            rng.random_range(-0.7..0.7) * z,
            rng.random_range(-0.5..0.5) * z,
            z,
        );
        let size: f64 = rng.random_range(0.05..1.5);
        let mut corner = || {
            c + Vector3::new(
                rng.random_range(-size..size),
                rng.random_range(-size..size),
                rng.random_range(-size..size),
            )
        };
        let (a, b, d) = (corner(), corner(), corner());
        let label = if rng.random_bool(0.5) {
            InterfaceLabel::FreeOccupied
        } else {
            InterfaceLabel::FreeUnknown
        };
        m.push_triangle_vertices(a, b, d, label);
    }
    m
}

/// Pixels whose centre lies within `radius` pixels of any projected triangle
/// edge, after clipping each triangle to `z ≥ z_near` (camera frame).
pub fn edge_mask(mesh: &LabeledMesh<f64>, cam: &CameraModel<f64>, radius: f64) -> Vec<bool> {
    let mut mask = vec![false; cam.width * cam.height];
    for i in 0..mesh.triangles.len() {
        let poly = clip_near(&mesh.triangle(i), cam.z_near);
        let pts: Vec<(f64, f64)> = poly
            .iter()
            .map(|p| (cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy))
            .collect();
        for k in 0..pts.len() {
            mark_segment(&mut mask, cam, pts[k], pts[(k + 1) % pts.len()], radius);
        }
    }
    mask
}

fn clip_near(tri: &[Vector3<f64>; 3], z_near: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(4);
    for k in 0..3 {
        let (a, b) = (tri[k], tri[(k + 1) % 3]);
        let (ina, inb) = (a.z >= z_near, b.z >= z_near);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (z_near - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

fn mark_segment(mask: &mut [bool], cam: &CameraModel<f64>, a: (f64, f64), b: (f64, f64), r: f64) {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let lo_x = (a.0.min(b.0) - r).floor().max(0.0);
    let hi_x = (a.0.max(b.0) + r).ceil().min(w - 1.0);
    let lo_y = (a.1.min(b.1) - r).floor().max(0.0);
    let hi_y = (a.1.max(b.1) + r).ceil().min(h - 1.0);
    if lo_x > hi_x || lo_y > hi_y {
        return;
    }
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for row in lo_y as usize..=hi_y as usize {
        for col in lo_x as usize..=hi_x as usize {
            let (px, py) = (col as f64 - a.0, row as f64 - a.1);
            let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (ex, ey) = (px - t * dx, py - t * dy);
            if ex * ex + ey * ey <= r * r {
                mask[row * cam.width + col] = true;
            }
        }
    }
}

/// Non-masked pixels, and how many of those agree in label and (where both
/// are surfaces) in depth within `tol`.
pub fn agreement(a: &LabeledRender<f64>, b: &LabeledRender<f64>, mask: &[bool], tol: f64) -> (usize, usize) {
    let mut considered = 0;
    let mut agree = 0;
    for i in 0..a.len() {
        if mask[i] {
            continue;
        }
        considered += 1;
        let (pa, pb) = (a.pixel_at(i), b.pixel_at(i));
        let depth_ok = pa.label == PixelLabel::Background || (pa.depth - pb.depth).abs() <= tol;
        if pa.label == pb.label && depth_ok {
            agree += 1;
        }
    }
    (considered, agree)
}
