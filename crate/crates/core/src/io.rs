//! Depth PNGs, TUM trajectories and the TUM RGB-D directory layout.
//!
//! Depth files are 16-bit single-channel PNGs where a count `v` means
//! `v / depth_scale` meters and `0` means no return. Trajectories are text
//! files with one `timestamp tx ty tz qx qy qz qw` record per line and `#`
//! comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::depth::DepthImage;
use crate::geometry::RigidTransform;
use crate::scalar::Real;

/// Counts per meter used by the TUM RGB-D depth PNGs.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;

/// Max timestamp gap when associating a depth frame with a ground-truth pose.
pub const GT_ASSOCIATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("{path}: expected a 16-bit single-channel image, found {found}")]
    BitDepth { path: PathBuf, found: String },
    #[error("depth scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: timestamp {t} does not increase")]
    NonMonotonic { path: PathBuf, line: usize, t: f64 },
    #[error("need at least two frames, got {0}")]
    TooFewFrames(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_depth<T: Real>(path: &Path, depth_scale: f64) -> Result<DepthImage<T>, IoError> {
    if !(depth_scale > 0.0 && depth_scale.is_finite()) {
        return Err(IoError::InvalidScale(depth_scale));
    }
    let reader = image::ImageReader::open(path).map_err(io_err(path))?;
    let img = reader
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| IoError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let buf = match img {
        DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(IoError::BitDepth {
                path: path.to_path_buf(),
                found: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = buf.dimensions();
    let scale = T::lit(depth_scale);
    let data = buf
        .into_raw()
        .into_iter()
        .map(|v| {
            if v == 0 {
                T::NAN
            } else {
                T::from_u16(v).unwrap() / scale
            }
        })
        .collect();
    Ok(DepthImage {
        width: w as usize,
        height: h as usize,
        data,
        timestamp: None,
    })
}

/// Quantizes to `round(d · depth_scale)` counts; invalid or out-of-range
/// values are written as 0.
pub fn save_depth<T: Real>(
    path: &Path,
    depth: &DepthImage<T>,
    depth_scale: f64,
) -> Result<(), IoError> {
    if !(depth_scale > 0.0 && depth_scale.is_finite()) {
        return Err(IoError::InvalidScale(depth_scale));
    }
    let raw: Vec<u16> = depth
        .data
        .iter()
        .map(|&d| {
            if d.is_nan_value() {
                return 0;
            }
            let c = (d.as_f64() * depth_scale).round();
            if c >= 1.0 && c <= u16::MAX as f64 {
                c as u16
            } else {
                0
            }
        })
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, raw)
            .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| IoError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Time-ordered sequence of poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Real> {
    pub entries: Vec<(f64, RigidTransform<T>)>,
}

impl<T: Real> Default for Trajectory<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
        }
    }
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pose whose timestamp is closest to `t`, if within `tolerance` seconds.
    pub fn nearest(&self, t: f64, tolerance: f64) -> Option<&RigidTransform<T>> {
        let idx = self.entries.partition_point(|(ts, _)| *ts < t);
        let mut best: Option<(f64, usize)> = None;
        for i in [idx.wrapping_sub(1), idx] {
            if let Some((ts, _)) = self.entries.get(i) {
                let dt = (ts - t).abs();
                if best.is_none_or(|(b, _)| dt < b) {
                    best = Some((dt, i));
                }
            }
        }
        best.filter(|(dt, _)| *dt <= tolerance)
            .map(|(_, i)| &self.entries[i].1)
    }

    pub fn to_tum_string(&self) -> String {
        let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for (t, pose) in &self.entries {
            s.push_str(&format_tum_line(*t, pose));
            s.push('\n');
        }
        s
    }
}

/// One `timestamp tx ty tz qx qy qz qw` record.
pub fn format_tum_line<T: Real>(t: f64, pose: &RigidTransform<T>) -> String {
    let rot = Rotation3::from_matrix_unchecked(pose.rotation.map(|v| v.as_f64()));
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    let tr = pose.translation.map(|v| v.as_f64());
    let mut s = String::new();
    write!(
        s,
        "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        t, tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w
    )
    .unwrap();
    s
}

fn parse_floats(
    path: &Path,
    line_no: usize,
    line: &str,
    count: usize,
) -> Result<Vec<f64>, IoError> {
    let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg: e.to_string(),
    })?;
    if vals.len() != count {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("expected {count} fields, found {}", vals.len()),
        });
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: "non-finite value".into(),
        });
    }
    Ok(vals)
}

pub fn parse_trajectory<T: Real>(path: &Path, text: &str) -> Result<Trajectory<T>, IoError> {
    let mut entries: Vec<(f64, RigidTransform<T>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_floats(path, line_no, line, 8)?;
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-9 {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: "zero quaternion".into(),
            });
        }
        let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
        let pose = RigidTransform::new(
            rot.into_inner().map(T::lit),
            Vector3::new(v[1], v[2], v[3]).map(T::lit),
        );
        if let Some((prev, _)) = entries.last() {
            if v[0] <= *prev {
                return Err(IoError::NonMonotonic {
                    path: path.to_path_buf(),
                    line: line_no,
                    t: v[0],
                });
            }
        }
        entries.push((v[0], pose));
    }
    Ok(Trajectory { entries })
}

pub fn load_trajectory<T: Real>(path: &Path) -> Result<Trajectory<T>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_trajectory(path, &text)
}

pub fn save_trajectory<T: Real>(path: &Path, traj: &Trajectory<T>) -> Result<(), IoError> {
    fs::write(path, traj.to_tum_string()).map_err(io_err(path))
}

/// Matching pairs `(i, j)`: from frame `i`, `j` is the first later frame with
/// `t_j − t_i ≥ interval`; the next pair starts at `j`.
pub fn select_pairs(timestamps: &[f64], interval: f64) -> Result<Vec<(usize, usize)>, IoError> {
    if timestamps.len() < 2 {
        return Err(IoError::TooFewFrames(timestamps.len()));
    }
    let mut pairs = Vec::new();
    let mut i = 0;
    while i + 1 < timestamps.len() {
        let Some(j) = (i + 1..timestamps.len()).find(|&j| timestamps[j] - timestamps[i] >= interval)
        else {
            break;
        };
        pairs.push((i, j));
        i = j;
    }
    Ok(pairs)
}

/// One depth frame listed by a dataset directory.
#[derive(Debug, Clone)]
pub struct FrameEntry<T: Real> {
    pub timestamp: f64,
    pub path: PathBuf,
    pub ground_truth: Option<RigidTransform<T>>,
}

/// A TUM RGB-D style directory: `depth.txt` (`timestamp relative/path.png`),
/// the PNGs it names, and `groundtruth.txt`.
#[derive(Debug, Clone)]
pub struct TumDataset<T: Real> {
    pub root: PathBuf,
    pub frames: Vec<FrameEntry<T>>,
    pub ground_truth: Trajectory<T>,
    pub depth_scale: f64,
}

impl<T: Real> TumDataset<T> {
    pub fn open(root: &Path, depth_scale: f64) -> Result<Self, IoError> {
        if !(depth_scale > 0.0 && depth_scale.is_finite()) {
            return Err(IoError::InvalidScale(depth_scale));
        }
        let gt = load_trajectory::<T>(&root.join("groundtruth.txt"))?;
        let list_path = root.join("depth.txt");
        let text = fs::read_to_string(&list_path).map_err(io_err(&list_path))?;
        let mut frames = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(ts), Some(file), None) = (it.next(), it.next(), it.next()) else {
                return Err(IoError::Parse {
                    path: list_path.clone(),
                    line: i + 1,
                    msg: "expected `timestamp filename`".into(),
                });
            };
            let timestamp: f64 = ts.parse().map_err(|e: std::num::ParseFloatError| {
                IoError::Parse {
                    path: list_path.clone(),
                    line: i + 1,
                    msg: e.to_string(),
                }
            })?;
            if let Some(prev) = frames.last().map(|f: &FrameEntry<T>| f.timestamp) {
                if timestamp <= prev {
                    return Err(IoError::NonMonotonic {
                        path: list_path.clone(),
                        line: i + 1,
                        t: timestamp,
                    });
                }
            }
            frames.push(FrameEntry {
                timestamp,
                path: root.join(file),
                ground_truth: gt.nearest(timestamp, GT_ASSOCIATION_TOLERANCE).copied(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            frames,
            ground_truth: gt,
            depth_scale,
        })
    }

    /// Keeps frames with ground truth within the first `seconds` of the sequence.
    pub fn truncated(mut self, seconds: Option<f64>) -> Self {
        self.frames.retain(|f| f.ground_truth.is_some());
        if let (Some(limit), Some(t0)) = (seconds, self.frames.first().map(|f| f.timestamp)) {
            self.frames.retain(|f| f.timestamp - t0 <= limit);
        }
        self
    }

    pub fn load_frame(&self, index: usize) -> Result<DepthImage<T>, IoError> {
        let f = &self.frames[index];
        Ok(load_depth::<T>(&f.path, self.depth_scale)?.with_timestamp(f.timestamp))
    }
}

/// Writes a dataset directory in the layout [`TumDataset::open`] reads.
pub fn write_dataset<T: Real>(
    root: &Path,
    frames: &[DepthImage<T>],
    ground_truth: &Trajectory<T>,
    depth_scale: f64,
) -> Result<(), IoError> {
    let depth_dir = root.join("depth");
    fs::create_dir_all(&depth_dir).map_err(io_err(&depth_dir))?;
    let mut list = String::from("# timestamp filename\n");
    for (i, frame) in frames.iter().enumerate() {
        let t = frame.timestamp.unwrap_or(i as f64);
        let name = format!("{t:.6}.png");
        save_depth(&depth_dir.join(&name), frame, depth_scale)?;
        writeln!(list, "{t:.6} depth/{name}").unwrap();
    }
    let list_path = root.join("depth.txt");
    fs::write(&list_path, list).map_err(io_err(&list_path))?;
    save_trajectory(&root.join("groundtruth.txt"), ground_truth)
}
