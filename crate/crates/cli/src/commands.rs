use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rendermap::cost::{classification_image, evaluate_pose_with_render, CostReport};
use rendermap::depth::DepthImage;
use rendermap::geometry::{CameraModel, Pose6D, RigidTransform};
use rendermap::icp::{depth_cloud, icp_point_to_plane, icp_point_to_point};
use rendermap::io::{format_tum_line, load_depth, save_depth, write_dataset, TumDataset};
use rendermap::meshify::{meshify, LabeledMesh};
use rendermap::optimize::{align_rendered, scan_render, write_trace_csv};
use rendermap::pipeline::{drift_stats, run_sequence, summary_text, write_outputs, FrameSource, Method};
use rendermap::raster::{LabeledRender, PixelLabel};
use rendermap::scene::{scene_to_string, SceneSpec};

use crate::config::RunConfig;

/// Scene names with this prefix refer to the built-in scenes.
pub const BUILTIN_PREFIX: &str = "builtin:";

pub enum PairSelection {
    Indices(usize, usize),
    Files(PathBuf, PathBuf),
}

enum Source {
    Dataset(TumDataset<f64>),
    Scene(SceneSpec<f64>),
}

impl Source {
    fn frames(&self) -> &dyn FrameSource<f64> {
        match self {
            Source::Dataset(d) => d,
            Source::Scene(s) => s,
        }
    }
}

/// A sequence plus the camera its frames were taken with.
struct Opened {
    source: Source,
    cam: CameraModel<f64>,
}

fn load_scene(cfg: &RunConfig) -> Result<SceneSpec<f64>> {
    let Some(name) = cfg.scene.as_deref() else {
        bail!("no scene given (use --scene FILE or --scene builtin:NAME)");
    };
    let mut spec = match name.strip_prefix(BUILTIN_PREFIX) {
        Some(n) => SceneSpec::canned(n)?,
        None => {
            let text = fs::read_to_string(name).with_context(|| format!("cannot read scene file {name}"))?;
            SceneSpec::parse(&text).with_context(|| format!("scene file {name}"))?
        }
    };
    if let Some(s) = cfg.seed {
        spec.seed = s;
    }
    if let Some(n) = cfg.noise_sigma {
        spec.noise_sigma = n;
    }
    if let Some(limit) = cfg.seconds {
        let t0 = spec.trajectory[0].0;
        spec.trajectory.retain(|(t, _)| t - t0 <= limit);
    }
    Ok(spec)
}

/// Configured intrinsics scaled to the actual frame size.
fn frame_camera(cfg: &RunConfig, width: usize, height: usize) -> Result<CameraModel<f64>> {
    let c = cfg.camera()?;
    Ok(if (c.width, c.height) == (width, height) {
        c
    } else {
        c.resized(width, height)
    })
}

fn render_camera(cam: &CameraModel<f64>, cfg: &RunConfig) -> Result<CameraModel<f64>> {
    let (rw, rh) = (cfg.render_width, cfg.render_height);
    if cam.width < rw || cam.width % rw != 0 || cam.height != rh * (cam.width / rw) {
        bail!(
            "frames are {}x{}, which is not an integer multiple of the {rw}x{rh} render size",
            cam.width,
            cam.height
        );
    }
    Ok(cam.subsampled(cam.width / rw))
}

fn open_source(cfg: &RunConfig) -> Result<Opened> {
    match (&cfg.dataset, &cfg.scene) {
        (Some(dir), None) => {
            let ds = TumDataset::<f64>::open(dir, cfg.depth_scale)?.truncated(cfg.seconds);
            if ds.frames.is_empty() {
                bail!("{}: no depth frames with ground truth", dir.display());
            }
            let first = ds.load_frame(0)?;
            let cam = frame_camera(cfg, first.width, first.height)?;
            Ok(Opened {
                source: Source::Dataset(ds),
                cam,
            })
        }
        (None, Some(_)) => {
            let spec = load_scene(cfg)?;
            let cam = spec.camera;
            Ok(Opened {
                source: Source::Scene(spec),
                cam,
            })
        }
        _ => bail!("give exactly one of `dataset` and `scene`"),
    }
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    cfg.validate(true)?;
    cfg.write_resolved(&cfg.output)?;
    let opened = open_source(cfg)?;
    let render_cam = render_camera(&opened.cam, cfg)?;
    let records = run_sequence(opened.source.frames(), &opened.cam, &render_cam, &cfg.run_options())?;
    let stats = drift_stats(&records)?;
    write_outputs(&cfg.output, &records, &stats)?;
    print!("{}", summary_text(cfg.method, &stats));
    println!("outputs written to {}", cfg.output.display());
    Ok(())
}

struct Pair {
    map: DepthImage<f64>,
    scan: DepthImage<f64>,
    cam: CameraModel<f64>,
    ground_truth: Option<RigidTransform<f64>>,
    t_scan: f64,
}

fn load_pair(cfg: &RunConfig, sel: &PairSelection) -> Result<Pair> {
    match sel {
        PairSelection::Indices(i, j) => {
            cfg.validate(true)?;
            let opened = open_source(cfg)?;
            let src = opened.source.frames();
            let ts = src.timestamps();
            if *i >= ts.len() || *j >= ts.len() {
                bail!("pair {i} {j} is out of range: the sequence has {} frames", ts.len());
            }
            let ground_truth = match (src.ground_truth(*i), src.ground_truth(*j)) {
                (Some(a), Some(b)) => Some(a.inverse().compose(&b)),
                _ => None,
            };
            Ok(Pair {
                map: src.frame(*i)?,
                scan: src.frame(*j)?,
                cam: opened.cam,
                ground_truth,
                t_scan: ts[*j],
            })
        }
        PairSelection::Files(a, b) => {
            cfg.validate(false)?;
            if cfg.dataset.is_some() || cfg.scene.is_some() {
                bail!("--frames cannot be combined with a dataset or scene");
            }
            let map = load_depth::<f64>(a, cfg.depth_scale)?;
            let scan = load_depth::<f64>(b, cfg.depth_scale)?;
            if (map.width, map.height) != (scan.width, scan.height) {
                bail!(
                    "{} is {}x{} but {} is {}x{}",
                    a.display(),
                    map.width,
                    map.height,
                    b.display(),
                    scan.width,
                    scan.height
                );
            }
            let cam = frame_camera(cfg, map.width, map.height)?;
            Ok(Pair {
                map,
                scan,
                cam,
                ground_truth: None,
                t_scan: 0.0,
            })
        }
    }
}

/// Both frames at the render resolution, the map mesh and the scan render.
struct Prepared {
    render_cam: CameraModel<f64>,
    map: DepthImage<f64>,
    scan: DepthImage<f64>,
    mesh: LabeledMesh<f64>,
    z_s: LabeledRender<f64>,
}

fn prepare(pair: &Pair, cfg: &RunConfig) -> Result<Prepared> {
    let render_cam = render_camera(&pair.cam, cfg)?;
    let f = pair.map.width / render_cam.width;
    let (map, scan) = (pair.map.subsampled(f), pair.scan.subsampled(f));
    let align = cfg.align_options();
    let mesh = meshify(&map, &render_cam, &align.mesh)?;
    let z_s = scan_render(&scan, &render_cam, &align)?;
    Ok(Prepared {
        render_cam,
        map,
        scan,
        mesh,
        z_s,
    })
}

fn save_rgb(img: &rendermap::raster::LabeledRender<f64>, z_far: f64, path: &Path) -> Result<()> {
    img.to_rgb(z_far)
        .save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Classification image plus map and scan renders at `pose`.
fn write_images(p: &Prepared, pose: &Pose6D<f64>, cfg: &RunConfig) -> Result<CostReport> {
    let cost = cfg.align_options().cost;
    let (report, z_r) = evaluate_pose_with_render(&p.mesh, &p.z_s, &p.render_cam, pose, &cost)?;
    let out = &cfg.output;
    let path = out.join("classification.png");
    classification_image(&z_r, &p.z_s, cost.eps)?
        .save(&path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    save_rgb(&z_r, p.render_cam.z_far, &out.join("map_render.png"))?;
    save_rgb(&p.z_s, p.render_cam.z_far, &out.join("scan_render.png"))?;
    Ok(report)
}

fn pose_line(p: &RigidTransform<f64>) -> String {
    let a = p.to_pose().to_array();
    format!("{} {} {} {} {} {}", a[0], a[1], a[2], a[3], a[4], a[5])
}

pub fn align_pair(cfg: &RunConfig, sel: &PairSelection, x0: [f64; 6]) -> Result<()> {
    let pair = load_pair(cfg, sel)?;
    cfg.write_resolved(&cfg.output)?;
    let prep = prepare(&pair, cfg)?;
    let start = Pose6D::from_array(x0);
    let start_t = start.to_transform();
    let icp = cfg.icp_options();

    let mut notes = String::new();
    let (estimate, evaluations, converged) = match cfg.method {
        Method::RenderMap => {
            let mut align = cfg.align_options();
            align.trace = true;
            let r = align_rendered(&prep.mesh, &prep.z_s, &prep.render_cam, &start, &align)?;
            let path = cfg.output.join("trace.csv");
            let file = fs::File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
            write_trace_csv(&r.trace, BufWriter::new(file)).with_context(|| format!("cannot write {}", path.display()))?;
            writeln!(notes, "initial_cost {}", r.initial_cost).unwrap();
            if r.rejected_low_overlap {
                notes.push_str("warning no overlap at the initial pose\n");
            }
            (r.pose.to_transform(), r.evaluations, r.converged)
        }
        Method::IcpPointToPlane => {
            let o = icp_point_to_plane(&pair.map, &pair.scan, &pair.cam, &start_t, &icp)?;
            if let Some(d) = &o.diverged {
                writeln!(notes, "diverged {d}").unwrap();
            }
            (o.pose, o.iterations, o.converged)
        }
        Method::IcpPointToPoint => {
            let f = icp.downsample_factor;
            let src = depth_cloud(&pair.scan, &pair.cam, f, icp.max_range);
            let dst = depth_cloud(&pair.map, &pair.cam, f, icp.max_range);
            let o = icp_point_to_point(&src, &dst, &start_t, &icp)?;
            if let Some(d) = &o.diverged {
                writeln!(notes, "diverged {d}").unwrap();
            }
            (o.pose, o.iterations, o.converged)
        }
    };
    let report = write_images(&prep, &estimate.to_pose(), cfg)?;

    let mut text = String::from("# pose of the scan in the map camera: x y z (m) theta_x theta_y theta_z (rad, ZYX)\n");
    writeln!(text, "method {}", cfg.method).unwrap();
    writeln!(text, "pose {}", pose_line(&estimate)).unwrap();
    writeln!(text, "tum {}", format_tum_line(pair.t_scan, &estimate)).unwrap();
    writeln!(text, "cost {}", report.total).unwrap();
    text.push_str(&notes);
    writeln!(text, "evaluations {evaluations}").unwrap();
    writeln!(text, "converged {converged}").unwrap();
    if let Some(gt) = &pair.ground_truth {
        let err = gt.inverse().compose(&estimate);
        writeln!(text, "ground_truth {}", pose_line(gt)).unwrap();
        writeln!(text, "translation_error {}", err.translation.norm()).unwrap();
        writeln!(text, "rotation_error_deg {}", err.rotation_angle().to_degrees()).unwrap();
    }
    let path = cfg.output.join("pose.txt");
    fs::write(&path, &text).with_context(|| format!("cannot write {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn cost_text(r: &CostReport) -> String {
    let mut s = String::new();
    writeln!(s, "total {}", r.total).unwrap();
    writeln!(s, "rewards {}", r.rewards).unwrap();
    writeln!(s, "penalties {}", r.penalties).unwrap();
    writeln!(s, "ignored {}", r.ignored).unwrap();
    writeln!(s, "overlap {}", r.valid_overlap_fraction).unwrap();
    s.push_str("# pixel counts, rows = map label, columns = scan label\n");
    for a in PixelLabel::ALL {
        write!(s, "{a:?}").unwrap();
        for b in PixelLabel::ALL {
            write!(s, " {}", r.cells[a.index()][b.index()]).unwrap();
        }
        s.push('\n');
    }
    s
}

fn write_ply(mesh: &LabeledMesh<f64>, path: &Path) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    mesh.write_ply(BufWriter::new(file))
        .with_context(|| format!("cannot write {}", path.display()))
}

pub fn render_debug(cfg: &RunConfig, sel: &PairSelection, pose: [f64; 6]) -> Result<()> {
    let pair = load_pair(cfg, sel)?;
    cfg.write_resolved(&cfg.output)?;
    let prep = prepare(&pair, cfg)?;
    let out = &cfg.output;
    write_ply(&prep.mesh, &out.join("map_mesh.ply"))?;
    let scan_mesh = meshify(&prep.scan, &prep.render_cam, &cfg.align_options().mesh)?;
    write_ply(&scan_mesh, &out.join("scan_mesh.ply"))?;
    save_depth(&out.join("map_depth.png"), &prep.map, cfg.depth_scale)?;
    save_depth(&out.join("scan_depth.png"), &prep.scan, cfg.depth_scale)?;
    let report = write_images(&prep, &Pose6D::from_array(pose), cfg)?;
    let text = cost_text(&report);
    let path = out.join("cost.txt");
    fs::write(&path, &text).with_context(|| format!("cannot write {}", path.display()))?;
    print!("{text}");
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    cfg.validate(false)?;
    if cfg.dataset.is_some() {
        bail!("synth renders a scene; `dataset` must not be set");
    }
    let spec = load_scene(cfg)?;
    cfg.write_resolved(&cfg.output)?;
    let frames = (0..spec.frame_count())
        .map(|i| Ok(spec.render_frame(i)?.with_timestamp(spec.trajectory[i].0)))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(&cfg.output, &frames, &spec.ground_truth(), cfg.depth_scale)?;
    let path = cfg.output.join("scene.txt");
    fs::write(&path, scene_to_string(&spec)).with_context(|| format!("cannot write {}", path.display()))?;

    // intrinsics for reading the dataset back with `run --config camera.cfg`
    let c = &spec.camera;
    let mut cam = String::from("# camera of the rendered frames\n");
    for (k, v) in [
        ("width", c.width.to_string()),
        ("height", c.height.to_string()),
        ("fx", c.fx.to_string()),
        ("fy", c.fy.to_string()),
        ("cx", c.cx.to_string()),
        ("cy", c.cy.to_string()),
        ("z_near", c.z_near.to_string()),
        ("z_far", c.z_far.to_string()),
        ("render_width", c.width.to_string()),
        ("render_height", c.height.to_string()),
        ("depth_scale", cfg.depth_scale.to_string()),
    ] {
        writeln!(cam, "{k} = {v}").unwrap();
    }
    let path = cfg.output.join("camera.cfg");
    fs::write(&path, cam).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {} frames to {}", frames.len(), cfg.output.display());
    Ok(())
}
