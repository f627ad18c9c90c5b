//! Conversion of a depth image into free-occupied / free-unknown interface
//! triangles.
//!
//! Every pixel contributes one vertex. Valid returns are backprojected at their
//! measured depth; missing returns (and returns beyond `max_range`) are placed
//! at `max_range` along their pixel ray. Each 2x2 pixel block becomes a quad
//! split along its top-left/bottom-right diagonal:
//!
//! * all four returns valid and no pairwise vertex distance above
//!   `discontinuity` → two [`InterfaceLabel::FreeOccupied`] triangles;
//! * any corner without a return → two [`InterfaceLabel::FreeUnknown`]
//!   triangles through the max-range vertices;
//! * all valid but spanning a discontinuity → two `FreeUnknown` triangles at
//!   the measured vertices.

use std::io::Write;

use nalgebra::Vector3;
use thiserror::Error;

use crate::depth::DepthImage;
use crate::geometry::CameraModel;
use crate::scalar::Real;

pub const DEFAULT_MAX_RANGE: f64 = 4.0;
pub const DEFAULT_DISCONTINUITY: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("depth image {width}x{height} is smaller than 2x2")]
    TooSmall { width: usize, height: usize },
    #[error("camera is {cam_w}x{cam_h} but depth image is {width}x{height}")]
    CameraMismatch {
        cam_w: usize,
        cam_h: usize,
        width: usize,
        height: usize,
    },
    #[error("max_range and discontinuity must be positive")]
    BadThreshold,
}

/// Interface a triangle lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InterfaceLabel {
    FreeOccupied,
    FreeUnknown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshifyOptions<T> {
    pub max_range: T,
    pub discontinuity: T,
}

impl<T: Real> Default for MeshifyOptions<T> {
    fn default() -> Self {
        Self {
            max_range: T::lit(DEFAULT_MAX_RANGE),
            discontinuity: T::lit(DEFAULT_DISCONTINUITY),
        }
    }
}

/// Triangle soup with one label per triangle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledMesh<T: Real> {
    pub vertices: Vec<Vector3<T>>,
    pub triangles: Vec<[u32; 3]>,
    pub labels: Vec<InterfaceLabel>,
}

impl<T: Real> LabeledMesh<T> {
    pub fn new() -> Self {
        Self {
            vertices: Vec::new(),
            triangles: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn push_vertex(&mut self, v: Vector3<T>) -> u32 {
        self.vertices.push(v);
        (self.vertices.len() - 1) as u32
    }

    pub fn push_triangle(&mut self, tri: [u32; 3], label: InterfaceLabel) {
        self.triangles.push(tri);
        self.labels.push(label);
    }

    /// Adds a triangle with its own three vertices.
    pub fn push_triangle_vertices(&mut self, a: Vector3<T>, b: Vector3<T>, c: Vector3<T>, label: InterfaceLabel) {
        let i = self.push_vertex(a);
        self.push_vertex(b);
        self.push_vertex(c);
        self.push_triangle([i, i + 1, i + 2], label);
    }

    pub fn count(&self, label: InterfaceLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn triangle(&self, i: usize) -> [Vector3<T>; 3] {
        let [a, b, c] = self.triangles[i];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// ASCII PLY with a per-face `label` property (0 free-occupied, 1 free-unknown).
    pub fn write_ply<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "ply")?;
        writeln!(out, "format ascii 1.0")?;
        writeln!(out, "element vertex {}", self.vertices.len())?;
        writeln!(out, "property float x")?;
        writeln!(out, "property float y")?;
        writeln!(out, "property float z")?;
        writeln!(out, "element face {}", self.triangles.len())?;
        writeln!(out, "property list uchar int vertex_indices")?;
        writeln!(out, "property uchar label")?;
        writeln!(out, "end_header")?;
        for v in &self.vertices {
            writeln!(out, "{} {} {}", v.x.as_f64(), v.y.as_f64(), v.z.as_f64())?;
        }
        for (t, l) in self.triangles.iter().zip(&self.labels) {
            let code = match l {
                InterfaceLabel::FreeOccupied => 0,
                InterfaceLabel::FreeUnknown => 1,
            };
            writeln!(out, "3 {} {} {} {}", t[0], t[1], t[2], code)?;
        }
        Ok(())
    }
}

pub fn meshify<T: Real>(
    depth: &DepthImage<T>,
    cam: &CameraModel<T>,
    opts: &MeshifyOptions<T>,
) -> Result<LabeledMesh<T>, MeshError> {
    let (w, h) = (depth.width, depth.height);
    if w < 2 || h < 2 {
        return Err(MeshError::TooSmall {
            width: w,
            height: h,
        });
    }
    if !depth.matches_camera(cam) {
        return Err(MeshError::CameraMismatch {
            cam_w: cam.width,
            cam_h: cam.height,
            width: w,
            height: h,
        });
    }
    if !(opts.max_range > T::zero() && opts.discontinuity > T::zero()) {
        return Err(MeshError::BadThreshold);
    }

    let mut valid = Vec::with_capacity(w * h);
    let mut vertices = Vec::with_capacity(w * h);
    for row in 0..h {
        let v = T::from_usize(row).unwrap();
        for col in 0..w {
            let u = T::from_usize(col).unwrap();
            match depth.get(col, row).filter(|&z| z <= opts.max_range) {
                Some(z) => {
                    valid.push(true);
                    vertices.push(cam.backproject(u, v, z));
                }
                None => {
                    valid.push(false);
                    vertices.push(cam.backproject(u, v, opts.max_range));
                }
            }
        }
    }

    let quads = (w - 1) * (h - 1);
    let mut triangles = Vec::with_capacity(2 * quads);
    let mut labels = Vec::with_capacity(2 * quads);
    let limit2 = opts.discontinuity * opts.discontinuity;
    for row in 0..h - 1 {
        for col in 0..w - 1 {
            let tl = row * w + col;
            let tr = tl + 1;
            let bl = tl + w;
            let br = bl + 1;
            let corners = [tl, tr, bl, br];
            let label = if corners.iter().all(|&i| valid[i]) {
                let mut span2 = T::zero();
                for a in 0..4 {
                    for b in a + 1..4 {
                        let d2 = (vertices[corners[a]] - vertices[corners[b]]).norm_squared();
                        span2 = span2.max(d2);
                    }
                }
                if span2 <= limit2 {
                    InterfaceLabel::FreeOccupied
                } else {
                    InterfaceLabel::FreeUnknown
                }
            } else {
                InterfaceLabel::FreeUnknown
            };
            triangles.push([tl as u32, tr as u32, br as u32]);
            triangles.push([tl as u32, br as u32, bl as u32]);
            labels.push(label);
            labels.push(label);
        }
    }
    Ok(LabeledMesh {
        vertices,
        triangles,
        labels,
    })
}
