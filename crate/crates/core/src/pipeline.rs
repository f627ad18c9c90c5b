//! Sequential scan-to-scan matching over a sequence with ground truth, and
//! drift statistics over the results.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;

use crate::cost::evaluate_pose;
use crate::depth::DepthImage;
use crate::geometry::{CameraModel, RigidTransform};
use crate::icp::{depth_cloud, icp_point_to_plane, icp_point_to_point, IcpOptions};
use crate::io::{format_tum_line, select_pairs, IoError, TumDataset};
use crate::meshify::meshify;
use crate::optimize::{align_rendered, scan_render, AlignError, AlignOptions};
use crate::scalar::Real;
use crate::scene::{SceneError, SceneSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("frame {0} has no ground-truth pose")]
    MissingGroundTruth(usize),
    #[error("frame {index} is {width}x{height}, which is not a multiple of the {cam_w}x{cam_h} render size")]
    FrameSize {
        index: usize,
        width: usize,
        height: usize,
        cam_w: usize,
        cam_h: usize,
    },
    #[error("no records to summarize")]
    NoRecords,
    #[error("unknown method `{0}` (expected rendermap, icp-p2plane or icp-p2point)")]
    UnknownMethod(String),
    #[error("failed to write {path}: {msg}")]
    Write { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    RenderMap,
    IcpPointToPlane,
    IcpPointToPoint,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::RenderMap, Method::IcpPointToPlane, Method::IcpPointToPoint];

    pub fn name(self) -> &'static str {
        match self {
            Method::RenderMap => "rendermap",
            Method::IcpPointToPlane => "icp-p2plane",
            Method::IcpPointToPoint => "icp-p2point",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PipelineError::UnknownMethod(s.to_string()))
    }
}

/// Depth frames with timestamps and ground-truth poses (camera → world).
pub trait FrameSource<T: Real>: Sync {
    fn timestamps(&self) -> Vec<f64>;
    fn ground_truth(&self, index: usize) -> Option<RigidTransform<T>>;
    fn frame(&self, index: usize) -> Result<DepthImage<T>, PipelineError>;
}

impl<T: Real> FrameSource<T> for TumDataset<T> {
    fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }
    fn ground_truth(&self, index: usize) -> Option<RigidTransform<T>> {
        self.frames[index].ground_truth
    }
    fn frame(&self, index: usize) -> Result<DepthImage<T>, PipelineError> {
        Ok(self.load_frame(index)?)
    }
}

impl<T: Real> FrameSource<T> for SceneSpec<T> {
    fn timestamps(&self) -> Vec<f64> {
        self.trajectory.iter().map(|(t, _)| *t).collect()
    }
    fn ground_truth(&self, index: usize) -> Option<RigidTransform<T>> {
        Some(self.pose(index))
    }
    fn frame(&self, index: usize) -> Result<DepthImage<T>, PipelineError> {
        Ok(self.render_frame(index)?)
    }
}

/// Frames already in memory.
#[derive(Debug, Clone)]
pub struct FrameList<T: Real> {
    pub frames: Vec<DepthImage<T>>,
    pub timestamps: Vec<f64>,
    pub poses: Vec<RigidTransform<T>>,
}

impl<T: Real> FrameSource<T> for FrameList<T> {
    fn timestamps(&self) -> Vec<f64> {
        self.timestamps.clone()
    }
    fn ground_truth(&self, index: usize) -> Option<RigidTransform<T>> {
        self.poses.get(index).copied()
    }
    fn frame(&self, index: usize) -> Result<DepthImage<T>, PipelineError> {
        Ok(self.frames[index].clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions<T> {
    pub method: Method,
    /// Minimum time gap between matched frames, seconds.
    pub interval: f64,
    /// Seed each pair with the previous pair's estimate instead of identity.
    /// Forces sequential matching.
    pub warm_start: bool,
    /// Worker threads; 0 or 1 runs on the calling thread.
    pub threads: usize,
    pub align: AlignOptions<T>,
    pub icp: IcpOptions<T>,
}

impl<T: Real> Default for RunOptions<T> {
    fn default() -> Self {
        Self {
            method: Method::RenderMap,
            interval: 1.0,
            warm_start: false,
            threads: 1,
            align: AlignOptions::default(),
            icp: IcpOptions::default(),
        }
    }
}

/// Result of matching one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord<T: Real> {
    pub from: usize,
    pub to: usize,
    pub t_from: f64,
    pub t_to: f64,
    pub method: Method,
    /// Estimated pose of frame `to` in frame `from`.
    pub estimate: RigidTransform<T>,
    pub ground_truth: RigidTransform<T>,
    /// Translation norm of `ground_truth⁻¹ ∘ estimate`, meters.
    pub translation_error: f64,
    /// Rotation angle of the same, radians.
    pub rotation_error: f64,
    pub gap: f64,
    /// `translation_error / gap`, m/s.
    pub drift: f64,
    /// Cost evaluations (rendermap) or iterations (ICP).
    pub evaluations: usize,
    /// Alignment cost of `estimate` against the `from` map.
    pub cost: i64,
    pub converged: bool,
    pub diverged: Option<String>,
    /// Seconds; not part of the reproducible CSV.
    pub wall_time: f64,
}

/// Outcome of aligning one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatch<T: Real> {
    /// Pose of the later frame in the earlier frame's camera.
    pub estimate: RigidTransform<T>,
    /// Cost evaluations (rendermap) or iterations (ICP).
    pub evaluations: usize,
    pub converged: bool,
    pub diverged: Option<String>,
}

/// Aligns one pair with `opts.method`: `map` is the earlier frame, `scan` the
/// later one, both described by `cam`. Rendermap works at `render_cam`, an
/// integer subsampling of `cam`. Aligner failures are reported in `diverged`.
pub fn match_pair<T: Real>(
    map: &DepthImage<T>,
    scan: &DepthImage<T>,
    cam: &CameraModel<T>,
    render_cam: &CameraModel<T>,
    x0: &RigidTransform<T>,
    opts: &RunOptions<T>,
) -> PairMatch<T> {
    let failed = |e: String| PairMatch {
        estimate: *x0,
        evaluations: 0,
        converged: false,
        diverged: Some(e),
    };
    match opts.method {
        Method::RenderMap => {
            let f = map.width / render_cam.width;
            let (m, s) = (map.subsampled(f), scan.subsampled(f));
            let run = || -> Result<_, AlignError> {
                let mesh = meshify(&m, render_cam, &opts.align.mesh)?;
                let z_s = scan_render(&s, render_cam, &opts.align)?;
                align_rendered(&mesh, &z_s, render_cam, &x0.to_pose(), &opts.align)
            };
            match run() {
                Ok(r) => PairMatch {
                    estimate: r.pose.to_transform(),
                    evaluations: r.evaluations,
                    converged: r.converged && !r.rejected_low_overlap,
                    diverged: r.rejected_low_overlap.then(|| "no overlap at the initial pose".to_string()),
                },
                Err(e) => failed(e.to_string()),
            }
        }
        Method::IcpPointToPlane => match icp_point_to_plane(map, scan, cam, x0, &opts.icp) {
            Ok(o) => PairMatch {
                estimate: o.pose,
                evaluations: o.iterations,
                converged: o.converged,
                diverged: o.diverged,
            },
            Err(e) => failed(e.to_string()),
        },
        Method::IcpPointToPoint => {
            let f = opts.icp.downsample_factor;
            let src = depth_cloud(scan, cam, f, opts.icp.max_range);
            let dst = depth_cloud(map, cam, f, opts.icp.max_range);
            match icp_point_to_point(&src, &dst, x0, &opts.icp) {
                Ok(o) => PairMatch {
                    estimate: o.pose,
                    evaluations: o.iterations,
                    converged: o.converged,
                    diverged: o.diverged,
                },
                Err(e) => failed(e.to_string()),
            }
        }
    }
}

/// Scores `estimate` with the alignment cost at the render resolution.
pub fn score_estimate<T: Real>(
    map: &DepthImage<T>,
    scan: &DepthImage<T>,
    render_cam: &CameraModel<T>,
    estimate: &RigidTransform<T>,
    opts: &AlignOptions<T>,
) -> Result<i64, AlignError> {
    let f = map.width / render_cam.width;
    let mesh = meshify(&map.subsampled(f), render_cam, &opts.mesh)?;
    let z_s = scan_render(&scan.subsampled(f), render_cam, opts)?;
    let report = evaluate_pose(&mesh, &z_s, render_cam, &estimate.to_pose(), &opts.cost).map_err(AlignError::from)?;
    Ok(report.total)
}

fn check_frame<T: Real>(d: &DepthImage<T>, index: usize, render_cam: &CameraModel<T>) -> Result<(), PipelineError> {
    let (w, h) = (render_cam.width, render_cam.height);
    let ok = d.width >= w && d.width % w == 0 && d.height == h * (d.width / w);
    if ok {
        Ok(())
    } else {
        Err(PipelineError::FrameSize {
            index,
            width: d.width,
            height: d.height,
            cam_w: w,
            cam_h: h,
        })
    }
}

/// Matches every [`select_pairs`] pair with the chosen method. `cam` describes
/// the frames as stored; `render_cam` is the rendermap working resolution,
/// an integer subsampling of `cam`. Aligner failures become diverged records;
/// frame loading and ground-truth errors abort the run.
pub fn run_sequence<T: Real, S: FrameSource<T> + ?Sized>(
    source: &S,
    cam: &CameraModel<T>,
    render_cam: &CameraModel<T>,
    opts: &RunOptions<T>,
) -> Result<Vec<MatchRecord<T>>, PipelineError> {
    let ts = source.timestamps();
    let pairs = select_pairs(&ts, opts.interval)?;
    let one = |k: usize, x0: &RigidTransform<T>| -> Result<MatchRecord<T>, PipelineError> {
        let (i, j) = pairs[k];
        let gi = source.ground_truth(i).ok_or(PipelineError::MissingGroundTruth(i))?;
        let gj = source.ground_truth(j).ok_or(PipelineError::MissingGroundTruth(j))?;
        let map = source.frame(i)?;
        let scan = source.frame(j)?;
        check_frame(&map, i, render_cam)?;
        check_frame(&scan, j, render_cam)?;
        let start = Instant::now();
        let PairMatch {
            estimate,
            evaluations,
            converged,
            mut diverged,
        } = match_pair(&map, &scan, cam, render_cam, x0, opts);
        let wall_time = start.elapsed().as_secs_f64();
        let cost = match score_estimate(&map, &scan, render_cam, &estimate, &opts.align) {
            Ok(c) => c,
            Err(e) => {
                diverged.get_or_insert(e.to_string());
                0
            }
        };
        let gt_rel = gi.inverse().compose(&gj);
        let err = gt_rel.inverse().compose(&estimate);
        let translation_error = err.translation.norm().as_f64();
        let gap = ts[j] - ts[i];
        Ok(MatchRecord {
            from: i,
            to: j,
            t_from: ts[i],
            t_to: ts[j],
            method: opts.method,
            estimate,
            ground_truth: gt_rel,
            translation_error,
            rotation_error: err.rotation_angle().as_f64(),
            gap,
            drift: translation_error / gap,
            evaluations,
            cost,
            converged,
            diverged,
            wall_time,
        })
    };

    if opts.warm_start {
        let mut out = Vec::with_capacity(pairs.len());
        let mut x0 = RigidTransform::identity();
        for k in 0..pairs.len() {
            let r = one(k, &x0)?;
            x0 = if r.diverged.is_none() {
                r.estimate
            } else {
                RigidTransform::identity()
            };
            out.push(r);
        }
        return Ok(out);
    }

    let threads = opts.threads.max(1).min(pairs.len().max(1));
    if threads == 1 {
        return (0..pairs.len()).map(|k| one(k, &RigidTransform::identity())).collect();
    }
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(pairs.len()));
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= pairs.len() {
                    break;
                }
                let r = one(k, &RigidTransform::identity());
                results.lock().unwrap().push((k, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(k, _)| *k);
    results.into_iter().map(|(_, r)| r).collect()
}

/// Drift histogram bin width, m/s.
pub const HIST_BIN: f64 = 0.001;
/// Number of regular bins; one overflow bin follows.
pub const HIST_BINS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct DriftStats {
    /// Records that did not diverge; all statistics below use only these.
    pub count: usize,
    pub diverged: usize,
    pub median_drift: f64,
    pub mean_drift: f64,
    /// Total error over total time gap.
    pub error_per_second: f64,
    pub median_error: f64,
    pub median_rotation_error: f64,
    /// Fraction of records with translation error below 1 cm.
    pub fraction_below_1cm: f64,
    pub median_evaluations: f64,
    /// `HIST_BINS` bins of `HIST_BIN` plus an overflow bin.
    pub histogram: Vec<usize>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn drift_stats<T: Real>(records: &[MatchRecord<T>]) -> Result<DriftStats, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::NoRecords);
    }
    let ok: Vec<&MatchRecord<T>> = records.iter().filter(|r| r.diverged.is_none()).collect();
    let n = ok.len();
    let mut histogram = vec![0; HIST_BINS + 1];
    for r in &ok {
        let bin = (r.drift / HIST_BIN).floor();
        let bin = if bin >= 0.0 && bin < HIST_BINS as f64 { bin as usize } else { HIST_BINS };
        histogram[bin] += 1;
    }
    // sorted before summing so the result does not depend on record order
    let sorted_sum = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>()
    };
    let drifts: Vec<f64> = ok.iter().map(|r| r.drift).collect();
    let total_err = sorted_sum(ok.iter().map(|r| r.translation_error).collect());
    let total_gap = sorted_sum(ok.iter().map(|r| r.gap).collect());
    Ok(DriftStats {
        count: n,
        diverged: records.len() - n,
        median_drift: median(drifts.clone()),
        mean_drift: if n == 0 { f64::NAN } else { sorted_sum(drifts) / n as f64 },
        error_per_second: if n == 0 { f64::NAN } else { total_err / total_gap },
        median_error: median(ok.iter().map(|r| r.translation_error).collect()),
        median_rotation_error: median(ok.iter().map(|r| r.rotation_error).collect()),
        fraction_below_1cm: if n == 0 {
            f64::NAN
        } else {
            ok.iter().filter(|r| r.translation_error < 0.01).count() as f64 / n as f64
        },
        median_evaluations: median(ok.iter().map(|r| r.evaluations as f64).collect()),
        histogram,
    })
}

pub const RECORDS_HEADER: &str = "from,to,t_from,t_to,method,\
est_x,est_y,est_z,est_qx,est_qy,est_qz,est_qw,\
gt_x,gt_y,gt_z,gt_qx,gt_qy,gt_qz,gt_qw,\
translation_error_m,rotation_error_rad,gap_s,drift_mps,evaluations,cost,converged,diverged";

fn pose_fields<T: Real>(p: &RigidTransform<T>) -> String {
    // reuse the trajectory formatter, dropping its timestamp
    let line = format_tum_line(0.0, p);
    line.split_whitespace().skip(1).collect::<Vec<_>>().join(",")
}

/// Reproducible CSV: no timing columns.
pub fn records_csv<T: Real>(records: &[MatchRecord<T>]) -> String {
    let mut s = String::from(RECORDS_HEADER);
    s.push('\n');
    for r in records {
        let reason = r.diverged.as_deref().unwrap_or("").replace([',', '\n'], ";");
        writeln!(
            s,
            "{},{},{:.6},{:.6},{},{},{},{},{},{},{},{},{},{},{}",
            r.from,
            r.to,
            r.t_from,
            r.t_to,
            r.method,
            pose_fields(&r.estimate),
            pose_fields(&r.ground_truth),
            r.translation_error,
            r.rotation_error,
            r.gap,
            r.drift,
            r.evaluations,
            r.cost,
            r.converged as u8,
            reason
        )
        .unwrap();
    }
    s
}

pub fn timing_csv<T: Real>(records: &[MatchRecord<T>]) -> String {
    let mut s = String::from("from,to,wall_time_s\n");
    for r in records {
        writeln!(s, "{},{},{:.6}", r.from, r.to, r.wall_time).unwrap();
    }
    s
}

pub fn summary_text(method: Method, stats: &DriftStats) -> String {
    let mut s = String::new();
    writeln!(s, "method: {method}").unwrap();
    writeln!(s, "pairs: {}", stats.count + stats.diverged).unwrap();
    writeln!(s, "diverged: {}", stats.diverged).unwrap();
    writeln!(s, "median_drift_mps: {:.6}", stats.median_drift).unwrap();
    writeln!(s, "mean_drift_mps: {:.6}", stats.mean_drift).unwrap();
    writeln!(s, "error_per_second_mps: {:.6}", stats.error_per_second).unwrap();
    writeln!(s, "median_error_m: {:.6}", stats.median_error).unwrap();
    writeln!(s, "median_rotation_error_deg: {:.4}", stats.median_rotation_error.to_degrees()).unwrap();
    writeln!(s, "fraction_error_below_1cm: {:.4}", stats.fraction_below_1cm).unwrap();
    writeln!(s, "median_evaluations: {}", stats.median_evaluations).unwrap();
    s
}

pub fn histogram_csv(stats: &DriftStats) -> String {
    let mut s = String::from("bin_start_mps,bin_end_mps,count\n");
    for (k, c) in stats.histogram.iter().enumerate() {
        let lo = k as f64 * HIST_BIN;
        if k < HIST_BINS {
            writeln!(s, "{:.3},{:.3},{}", lo, lo + HIST_BIN, c).unwrap();
        } else {
            writeln!(s, "{lo:.3},inf,{c}").unwrap();
        }
    }
    s
}

/// Stand-alone SVG bar chart of the drift histogram.
pub fn histogram_svg(stats: &DriftStats, title: &str) -> String {
    let (w, h, margin) = (640.0, 320.0, 40.0);
    let bars = stats.histogram.len() as f64;
    let bw = (w - 2.0 * margin) / bars;
    let peak = stats.histogram.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    let esc = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    writeln!(s, r#"<text x="{margin}" y="20" font-family="sans-serif" font-size="14">{esc}</text>"#).unwrap();
    for (k, &c) in stats.histogram.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let bh = (h - 2.0 * margin) * c as f64 / peak;
        let x = margin + k as f64 * bw;
        let fill = if k == HIST_BINS { "#c0392b" } else { "#2e6fd8" };
        writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="{fill}"><title>{c}</title></rect>"#,
            h - margin - bh,
            bw.max(1.0)
        )
        .unwrap();
    }
    let base = h - margin;
    writeln!(s, r#"<line x1="{margin}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, w - margin).unwrap();
    for tick in [0.0, 0.025, 0.05, 0.075, 0.1] {
        let x = margin + tick / HIST_BIN * bw;
        writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{tick}</text>"#,
            base + 14.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">drift (m/s), last bar = overflow</text>"#,
        w / 2.0,
        h - 6.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Estimated relative poses in trajectory format, keyed by the later frame's
/// timestamp.
pub fn estimates_tum<T: Real>(records: &[MatchRecord<T>]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw (pose of the later frame in the earlier frame)\n");
    for r in records {
        s.push_str(&format_tum_line(r.t_to, &r.estimate));
        s.push('\n');
    }
    s
}

/// Writes records.csv, timing.csv, summary.txt, drift_hist.csv,
/// drift_hist.svg and estimated_poses.txt into `dir`.
pub fn write_outputs<T: Real>(dir: &Path, records: &[MatchRecord<T>], stats: &DriftStats) -> Result<(), PipelineError> {
    let method = records.first().map(|r| r.method).unwrap_or(Method::RenderMap);
    let put = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| PipelineError::Write {
            path,
            msg: e.to_string(),
        })
    };
    fs::create_dir_all(dir).map_err(|e| PipelineError::Write {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    put("records.csv", records_csv(records))?;
    put("timing.csv", timing_csv(records))?;
    put("summary.txt", summary_text(method, stats))?;
    put("drift_hist.csv", histogram_csv(stats))?;
    put("drift_hist.svg", histogram_svg(stats, &format!("{method} drift rates")))?;
    put("estimated_poses.txt", estimates_tum(records))?;
    Ok(())
}
