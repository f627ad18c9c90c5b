//! Analytic primitive scenes and exact ray-cast depth rendering, used to
//! generate noiseless (or seeded-noise) depth sequences with known poses.
//!
//! Scene files hold one item per line, `keyword key=value ...`, with `#`
//! comments. Vectors are comma separated:
//!
//! ```text
//! camera tum-fr3 width=320 height=240      # or explicit fx= fy= cx= cy=
//! range max=4.0
//! noise sigma=0.0 seed=7
//! plane point=0,1.2,0 normal=0,-1,0
//! quad center=0,0,3 u=1,0,0 v=0,1,0        # parallelogram, half-extent vectors
//! box center=0,0.8,2 size=1,0.05,0.6 rot=0,0.3,0
//! frame t=0.0 pose=0,0,0,0,0,0             # x,y,z,θx,θy,θz of camera → world
//! ```

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::depth::DepthImage;
use crate::geometry::{euler_zyx_to_matrix, CameraModel, Pose6D, RigidTransform};
use crate::io::Trajectory;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scene has no frames")]
    NoFrames,
    #[error("unknown canned scene `{0}`")]
    UnknownCanned(String),
    #[error("frame index {index} out of range ({len} frames)")]
    FrameIndex { index: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive<T: Real> {
    /// Infinite plane.
    Plane {
        point: Vector3<T>,
        normal: Vector3<T>,
    },
    /// Parallelogram `center + a·u + b·v`, `|a|, |b| ≤ 1`.
    Quad {
        center: Vector3<T>,
        u: Vector3<T>,
        v: Vector3<T>,
    },
    /// Oriented box with full side lengths `size`.
    Box {
        center: Vector3<T>,
        size: Vector3<T>,
        rotation: Matrix3<T>,
    },
}

impl<T: Real> Primitive<T> {
    /// Smallest ray parameter `t > 0` with `origin + t·dir` on the surface.
    pub fn intersect(&self, origin: &Vector3<T>, dir: &Vector3<T>) -> Option<T> {
        let eps = T::lit(1e-12);
        match self {
            Primitive::Plane { point, normal } => {
                let denom = normal.dot(dir);
                if denom.abs() < eps {
                    return None;
                }
                let t = normal.dot(&(point - origin)) / denom;
                (t > T::zero()).then_some(t)
            }
            Primitive::Quad { center, u, v } => {
                let n = u.cross(v);
                let denom = n.dot(dir);
                if denom.abs() < eps {
                    return None;
                }
                let t = n.dot(&(center - origin)) / denom;
                if t <= T::zero() {
                    return None;
                }
                let d = origin + dir * t - center;
                // solve d = a·u + b·v in the plane
                let uu = u.dot(u);
                let vv = v.dot(v);
                let uv = u.dot(v);
                let du = d.dot(u);
                let dv = d.dot(v);
                let det = uu * vv - uv * uv;
                let a = (du * vv - dv * uv) / det;
                let b = (dv * uu - du * uv) / det;
                (a.abs() <= T::one() && b.abs() <= T::one()).then_some(t)
            }
            Primitive::Box {
                center,
                size,
                rotation,
            } => {
                let rt = rotation.transpose();
                let o = rt * (origin - center);
                let d = rt * dir;
                let half = size * T::lit(0.5);
                let mut t0 = -T::INFINITY;
                let mut t1 = T::INFINITY;
                for k in 0..3 {
                    if d[k].abs() < eps {
                        if o[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[k] - o[k]) / d[k];
                    let b = (half[k] - o[k]) / d[k];
                    let (a, b) = if a < b { (a, b) } else { (b, a) };
                    t0 = t0.max(a);
                    t1 = t1.min(b);
                }
                if t0 > t1 || t1 <= T::zero() {
                    return None;
                }
                Some(if t0 > T::zero() { t0 } else { t1 })
            }
        }
    }
}

/// Primitive layout, sensor trajectory and sensor model.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec<T: Real> {
    pub primitives: Vec<Primitive<T>>,
    /// `(timestamp, camera → world pose)`.
    pub trajectory: Vec<(f64, Pose6D<T>)>,
    pub camera: CameraModel<T>,
    pub noise_sigma: T,
    pub seed: u64,
    pub max_range: T,
}

impl<T: Real> SceneSpec<T> {
    pub fn new(camera: CameraModel<T>) -> Self {
        Self {
            primitives: Vec::new(),
            trajectory: Vec::new(),
            camera,
            noise_sigma: T::zero(),
            seed: 0,
            max_range: T::lit(4.0),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.trajectory.len()
    }

    pub fn pose(&self, index: usize) -> RigidTransform<T> {
        self.trajectory[index].1.to_transform()
    }

    pub fn ground_truth(&self) -> Trajectory<T> {
        Trajectory {
            entries: self
                .trajectory
                .iter()
                .map(|(t, p)| (*t, p.to_transform()))
                .collect(),
        }
    }

    /// Nearest hit distance along a world-space ray.
    pub fn cast(&self, origin: &Vector3<T>, dir: &Vector3<T>) -> Option<T> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .fold(None, |best: Option<T>, t| Some(best.map_or(t, |b| b.min(t))))
    }

    /// Ray-cast depth image of frame `index` with optional seeded noise.
    pub fn render_frame(&self, index: usize) -> Result<DepthImage<T>, SceneError> {
        let (ts, pose) = self
            .trajectory
            .get(index)
            .ok_or(SceneError::FrameIndex {
                index,
                len: self.trajectory.len(),
            })?;
        let pose = pose.to_transform();
        let cam = &self.camera;
        let mut img = DepthImage::from_fn(cam.width, cam.height, |col, row| {
            let ray = cam.ray(T::from_usize(col).unwrap(), T::from_usize(row).unwrap());
            let dir = pose.transform_vector(&ray);
            // ray has unit z in the camera frame, so the parameter is the depth
            match self.cast(&pose.translation, &dir) {
                Some(z) if z <= self.max_range => z,
                _ => T::NAN,
            }
        });
        if self.noise_sigma > T::zero() {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let normal = Normal::new(0.0, self.noise_sigma.as_f64()).expect("finite sigma");
            for v in img.data.iter_mut() {
                let n = normal.sample(&mut rng);
                if !v.is_nan_value() {
                    let z = *v + T::lit(n);
                    *v = if z > T::zero() && z <= self.max_range { z } else { T::NAN };
                }
            }
        }
        Ok(img.with_timestamp(*ts))
    }

    pub fn parse(text: &str) -> Result<Self, SceneError> {
        parse_scene(text)
    }

    /// Built-in scene by name: `room`, `oblique-wall`, `table-corner`, `ground`.
    pub fn canned(name: &str) -> Result<Self, SceneError> {
        let text = match name {
            "room" => ROOM,
            "oblique-wall" => OBLIQUE_WALL,
            "table-corner" => TABLE_CORNER,
            "ground" => GROUND,
            other => return Err(SceneError::UnknownCanned(other.to_string())),
        };
        Self::parse(text)
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> SceneError {
    SceneError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_f64(line: usize, key: &str, s: &str) -> Result<f64, SceneError> {
    let v: f64 = s
        .parse()
        .map_err(|_| parse_err(line, format!("`{key}`: cannot parse `{s}` as a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("`{key}` must be finite")));
    }
    Ok(v)
}

fn parse_vec<const N: usize>(line: usize, key: &str, s: &str) -> Result<[f64; N], SceneError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != N {
        return Err(parse_err(
            line,
            format!("`{key}` needs {N} comma-separated values, got {}", parts.len()),
        ));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_f64(line, key, p.trim())?;
    }
    Ok(out)
}

struct Fields<'a> {
    line: usize,
    kv: Vec<(&'a str, &'a str)>,
    flags: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    fn get(&self, key: &str) -> Option<&'a str> {
        self.kv.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn req(&self, key: &str) -> Result<&'a str, SceneError> {
        self.get(key)
            .ok_or_else(|| parse_err(self.line, format!("missing `{key}=`")))
    }

    fn vec3<T: Real>(&self, key: &str) -> Result<Vector3<T>, SceneError> {
        let [a, b, c] = parse_vec::<3>(self.line, key, self.req(key)?)?;
        Ok(Vector3::new(T::lit(a), T::lit(b), T::lit(c)))
    }

    fn num(&self, key: &str) -> Result<f64, SceneError> {
        parse_f64(self.line, key, self.req(key)?)
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), SceneError> {
        for (k, _) in &self.kv {
            if !allowed.contains(k) {
                return Err(parse_err(self.line, format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }
}

fn parse_scene<T: Real>(text: &str) -> Result<SceneSpec<T>, SceneError> {
    let mut spec = SceneSpec::new(CameraModel::tum_fr3().resized(320, 240));
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let keyword = tokens.next().unwrap();
        let mut fields = Fields {
            line,
            kv: Vec::new(),
            flags: Vec::new(),
        };
        for tok in tokens {
            match tok.split_once('=') {
                Some((k, v)) => fields.kv.push((k, v)),
                None => fields.flags.push(tok),
            }
        }
        if keyword != "camera" {
            if let Some(f) = fields.flags.first() {
                return Err(parse_err(line, format!("unexpected token `{f}`")));
            }
        }
        match keyword {
            "camera" => {
                fields.check_keys(&["width", "height", "fx", "fy", "cx", "cy", "near", "far"])?;
                let size = |k: &str, d: usize| -> Result<usize, SceneError> {
                    fields.get(k).map_or(Ok(d), |v| {
                        v.parse::<usize>()
                            .map_err(|_| parse_err(line, format!("`{k}` must be a positive integer")))
                    })
                };
                let width = size("width", 320)?;
                let height = size("height", 240)?;
                let base: CameraModel<T> = if fields.flags.contains(&"tum-fr3") {
                    CameraModel::tum_fr3().resized(width, height)
                } else if let Some(f) = fields.flags.first() {
                    return Err(parse_err(line, format!("unknown camera preset `{f}`")));
                } else {
                    CameraModel {
                        width,
                        height,
                        fx: T::lit(fields.num("fx")?),
                        fy: T::lit(fields.num("fy")?),
                        cx: T::lit(fields.num("cx")?),
                        cy: T::lit(fields.num("cy")?),
                        z_near: T::lit(0.1),
                        z_far: T::lit(10.0),
                    }
                };
                let mut cam = base;
                for (k, slot) in [("fx", &mut cam.fx), ("fy", &mut cam.fy), ("cx", &mut cam.cx), ("cy", &mut cam.cy), ("near", &mut cam.z_near), ("far", &mut cam.z_far)] {
                    if let Some(v) = fields.get(k) {
                        *slot = T::lit(parse_f64(line, k, v)?);
                    }
                }
                cam.validate().map_err(|e| parse_err(line, e.to_string()))?;
                spec.camera = cam;
            }
            "range" => {
                fields.check_keys(&["max"])?;
                let m = fields.num("max")?;
                if m <= 0.0 {
                    return Err(parse_err(line, "`max` must be positive"));
                }
                spec.max_range = T::lit(m);
            }
            "noise" => {
                fields.check_keys(&["sigma", "seed"])?;
                let s = fields.num("sigma")?;
                if s < 0.0 {
                    return Err(parse_err(line, "`sigma` must be non-negative"));
                }
                spec.noise_sigma = T::lit(s);
                if let Some(seed) = fields.get("seed") {
                    spec.seed = seed
                        .parse()
                        .map_err(|_| parse_err(line, "`seed` must be an unsigned integer"))?;
                }
            }
            "plane" => {
                fields.check_keys(&["point", "normal"])?;
                let normal: Vector3<T> = fields.vec3("normal")?;
                if normal.norm() < T::lit(1e-12) {
                    return Err(parse_err(line, "`normal` must be non-zero"));
                }
                spec.primitives.push(Primitive::Plane {
                    point: fields.vec3("point")?,
                    normal: normal.normalize(),
                });
            }
            "quad" => {
                fields.check_keys(&["center", "u", "v"])?;
                let u: Vector3<T> = fields.vec3("u")?;
                let v: Vector3<T> = fields.vec3("v")?;
                if u.cross(&v).norm() < T::lit(1e-12) {
                    return Err(parse_err(line, "`u` and `v` must span a plane"));
                }
                spec.primitives.push(Primitive::Quad {
                    center: fields.vec3("center")?,
                    u,
                    v,
                });
            }
            "box" => {
                fields.check_keys(&["center", "size", "rot"])?;
                let size: Vector3<T> = fields.vec3("size")?;
                if size.iter().any(|s| *s <= T::zero()) {
                    return Err(parse_err(line, "`size` components must be positive"));
                }
                let rot = match fields.get("rot") {
                    Some(_) => {
                        let r: Vector3<T> = fields.vec3("rot")?;
                        euler_zyx_to_matrix(r.x, r.y, r.z)
                    }
                    None => Matrix3::identity(),
                };
                spec.primitives.push(Primitive::Box {
                    center: fields.vec3("center")?,
                    size,
                    rotation: rot,
                });
            }
            "frame" => {
                fields.check_keys(&["t", "pose"])?;
                let t = fields.num("t")?;
                let p = parse_vec::<6>(line, "pose", fields.req("pose")?)?;
                if let Some((prev, _)) = spec.trajectory.last() {
                    if t <= *prev {
                        return Err(parse_err(line, "frame timestamps must increase"));
                    }
                }
                spec.trajectory
                    .push((t, Pose6D::from_array(p.map(T::lit))));
            }
            other => return Err(parse_err(line, format!("unknown item `{other}`"))),
        }
    }
    if spec.trajectory.is_empty() {
        return Err(SceneError::NoFrames);
    }
    Ok(spec)
}

/// Serializes a scene back into the text format.
pub fn scene_to_string<T: Real>(spec: &SceneSpec<T>) -> String {
    use std::fmt::Write as _;
    let f = |v: &Vector3<T>| format!("{},{},{}", v.x.as_f64(), v.y.as_f64(), v.z.as_f64());
    let c = &spec.camera;
    let mut s = String::new();
    writeln!(
        s,
        "camera width={} height={} fx={} fy={} cx={} cy={} near={} far={}",
        c.width,
        c.height,
        c.fx.as_f64(),
        c.fy.as_f64(),
        c.cx.as_f64(),
        c.cy.as_f64(),
        c.z_near.as_f64(),
        c.z_far.as_f64()
    )
    .unwrap();
    writeln!(s, "range max={}", spec.max_range.as_f64()).unwrap();
    writeln!(s, "noise sigma={} seed={}", spec.noise_sigma.as_f64(), spec.seed).unwrap();
    for p in &spec.primitives {
        match p {
            Primitive::Plane { point, normal } => {
                writeln!(s, "plane point={} normal={}", f(point), f(normal)).unwrap()
            }
            Primitive::Quad { center, u, v } => {
                writeln!(s, "quad center={} u={} v={}", f(center), f(u), f(v)).unwrap()
            }
            Primitive::Box {
                center,
                size,
                rotation,
            } => {
                let (ax, ay, az) = crate::geometry::matrix_to_euler_zyx(rotation);
                writeln!(
                    s,
                    "box center={} size={} rot={},{},{}",
                    f(center),
                    f(size),
                    ax.as_f64(),
                    ay.as_f64(),
                    az.as_f64()
                )
                .unwrap()
            }
        }
    }
    for (t, p) in &spec.trajectory {
        let a = p.to_array().map(|v| v.as_f64());
        writeln!(
            s,
            "frame t={} pose={},{},{},{},{},{}",
            t, a[0], a[1], a[2], a[3], a[4], a[5]
        )
        .unwrap();
    }
    s
}

/// Office-like room: floor, ceiling, three walls with a doorway, furniture.
pub const ROOM: &str = "\
# office-like room; world frame is the first camera frame (y down)
camera tum-fr3 width=320 height=240
range max=4.0
noise sigma=0.0 seed=1
plane point=0,1.2,0 normal=0,-1,0
plane point=0,-1.4,0 normal=0,1,0
# back wall with a doorway between x=0.3 and x=1.1
quad center=-0.95,-0.1,3.4 u=1.25,0,0 v=0,1.3,0
quad center=1.65,-0.1,3.4 u=0.55,0,0 v=0,1.3,0
quad center=0.7,-0.95,3.4 u=0.4,0,0 v=0,0.45,0
# side walls
quad center=-2.2,-0.1,1.7 u=0,0,1.7 v=0,1.3,0
quad center=2.2,-0.1,1.7 u=0,0,1.7 v=0,1.3,0
# desk with legs, cabinet, pillar, boxes
box center=-0.6,0.45,2.2 size=1.4,0.05,0.7 rot=0,0.15,0
box center=-1.2,0.84,2.0 size=0.06,0.72,0.06
box center=0.05,0.84,2.3 size=0.06,0.72,0.06
box center=1.5,0.5,2.6 size=0.6,1.4,0.5 rot=0,-0.3,0
box center=0.5,-0.1,2.9 size=0.25,2.6,0.25
box center=-0.3,1.0,1.5 size=0.4,0.4,0.4 rot=0,0.5,0
box center=-0.7,0.25,2.15 size=0.3,0.35,0.25 rot=0,-0.2,0
box center=1.0,1.05,1.4 size=0.3,0.3,0.5 rot=0,0.2,0.05
frame t=0 pose=0,0,0,0,0,0
frame t=1 pose=0.10,0.01,0.06,0.01,0.03,0.02
frame t=2 pose=0.18,0.02,0.14,0.02,0.07,0.03
frame t=3 pose=0.25,0.00,0.22,0.01,0.10,0.02
frame t=4 pose=0.31,-0.02,0.30,-0.01,0.12,0.00
frame t=5 pose=0.36,-0.02,0.38,-0.02,0.10,-0.02
frame t=6 pose=0.40,-0.01,0.47,-0.01,0.06,-0.03
frame t=7 pose=0.42,0.01,0.55,0.00,0.01,-0.02
frame t=8 pose=0.41,0.02,0.62,0.01,-0.04,-0.01
frame t=9 pose=0.38,0.02,0.68,0.02,-0.09,0.00
";

/// Ground plane plus a wall segment seen at a grazing angle, both ends in
/// view; the camera slides parallel to the wall.
pub const OBLIQUE_WALL: &str = "\
camera tum-fr3 width=320 height=240
range max=4.0
noise sigma=0.0 seed=2
plane point=0,1.0,0 normal=0,-1,0
# wall along (sin 25°, 0, cos 25°) from z = 1.8 to z = 3.4
quad center=-0.527,-0.2,2.6 u=0.373,0,0.8 v=0,1.2,0
frame t=0 pose=0,0,0,0,0,0
frame t=1 pose=0.0507,0,0.1088,0,0,0
frame t=2 pose=0.1014,0,0.2175,0,0,0
frame t=3 pose=0.1521,0,0.3263,0,0,0
frame t=4 pose=0.2029,0,0.4350,0,0,0
frame t=5 pose=0.2536,0,0.5438,0,0,0
";

/// A table top corner above a ground plane.
pub const TABLE_CORNER: &str = "\
camera tum-fr3 width=320 height=240
range max=4.0
plane point=0,1.2,0 normal=0,-1,0
box center=-0.6,0.45,2.6 size=1.2,0.04,0.8
frame t=0 pose=0,0,0,0,0,0
frame t=1 pose=0.05,0,0.05,0,0.02,0
";

/// A single ground plane below a level camera.
pub const GROUND: &str = "\
camera tum-fr3 width=320 height=240
range max=4.0
plane point=0,1.0,0 normal=0,-1,0
frame t=0 pose=0,0,0,0,0,0
";
