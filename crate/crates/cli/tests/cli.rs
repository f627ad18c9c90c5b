use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rendermap::scene::ROOM;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rendermap"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> String {
    let out = bin().args(args).output().unwrap();
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `key value...` lines of pose.txt / summary.txt style files.
fn field(text: &str, key: &str) -> Vec<f64> {
    let line = text
        .lines()
        .find(|l| l.split([' ', ':']).next() == Some(key))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"));
    line[key.len()..]
        .trim_start_matches(':')
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect()
}

fn synth_room(dir: &Path) -> PathBuf {
    let out = dir.join("room");
    run_ok(&["synth", "--scene", "builtin:room", "-o", s(&out)]);
    out
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(files(&p));
        } else {
            v.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    v.sort();
    v
}

#[test]
fn identical_frame_twice_gives_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth_room(tmp.path());
    let f = ds.join("depth/0.000000.png");
    let out = tmp.path().join("ap");
    run_ok(&["align-pair", "--frames", s(&f), s(&f), "-o", s(&out)]);
    let pose = fs::read_to_string(out.join("pose.txt")).unwrap();
    let p = field(&pose, "pose");
    assert_eq!(p.len(), 6);
    assert!(p.iter().all(|v| v.abs() < 1e-3), "{pose}");
    for f in ["trace.csv", "classification.png", "map_render.png", "scan_render.png", "config_resolved"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn missing_file_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no_such_frame.png");
    let err = run_err(&["align-pair", "--frames", s(&missing), s(&missing), "-o", s(&tmp.path().join("o"))]);
    assert!(err.contains("no_such_frame.png"), "{err}");
    let err = run_err(&["run", "--dataset", s(&tmp.path().join("nowhere")), "-o", s(&tmp.path().join("o"))]);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn known_offset_pair_matches_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let mut scene: String = ROOM.lines().filter(|l| !l.starts_with("frame")).map(|l| format!("{l}\n")).collect();
    scene.push_str("frame t=0 pose=0,0,0,0,0,0\n");
    scene.push_str(&format!("frame t=1 pose=0.1,0.05,0,0,0,{}\n", 5f64.to_radians()));
    let path = tmp.path().join("offset.scene");
    fs::write(&path, scene).unwrap();
    let out = tmp.path().join("ap");
    run_ok(&["align-pair", "--scene", s(&path), "--pair", "0", "1", "-o", s(&out)]);
    let pose = fs::read_to_string(out.join("pose.txt")).unwrap();
    assert!(field(&pose, "translation_error")[0] < 0.01, "{pose}");
    assert!(field(&pose, "rotation_error_deg")[0] < 0.5, "{pose}");
    assert!(field(&pose, "evaluations")[0] <= 700.0);
    let gt = field(&pose, "ground_truth");
    assert!((gt[0] - 0.1).abs() < 1e-12 && (gt[5] - 5f64.to_radians()).abs() < 1e-12);
}

#[test]
fn run_rows_follow_pairing_interval() {
    let tmp = tempfile::tempdir().unwrap();
    for (interval, rows) in [("1", 9), ("2", 4), ("3.5", 2)] {
        let out = tmp.path().join(format!("i{interval}"));
        let o = run_ok(&[
            "run",
            "--scene",
            "builtin:room",
            "--method",
            "icp-p2plane",
            "--interval",
            interval,
            "-o",
            s(&out),
        ]);
        let csv = fs::read_to_string(out.join("records.csv")).unwrap();
        assert_eq!(csv.lines().count(), rows + 1, "interval {interval}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("median_drift_mps"));
        for f in ["summary.txt", "drift_hist.svg", "drift_hist.csv", "estimated_poses.txt", "timing.csv"] {
            assert!(out.join(f).is_file(), "{f}");
        }
    }
}

#[test]
fn dataset_and_scene_together_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_err(&["run", "--scene", "builtin:room", "--dataset", s(tmp.path()), "-o", s(&tmp.path().join("o"))]);
    assert!(err.contains("dataset") && err.contains("scene"), "{err}");
    let err = run_err(&["run", "-o", s(&tmp.path().join("o"))]);
    assert!(err.contains("dataset") || err.contains("scene"), "{err}");
}

#[test]
fn bad_config_values_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("o");
    for set in ["eps=0", "max_range=-2", "discontinuity=0", "bogus=1", "threads=x"] {
        let err = run_err(&["run", "--scene", "builtin:room", "--set", set, "-o", s(&o)]);
        assert!(err.contains(set.split('=').next().unwrap()), "{set}: {err}");
    }
}

#[test]
fn rendermap_beats_point_to_point_on_degenerate_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let median = |method: &str| {
        let out = tmp.path().join(method);
        run_ok(&["run", "--scene", "builtin:oblique-wall", "--method", method, "-o", s(&out)]);
        field(&fs::read_to_string(out.join("summary.txt")).unwrap(), "median_drift_mps")[0]
    };
    let rm = median("rendermap");
    let p2p = median("icp-p2point");
    assert!(rm < p2p, "rendermap {rm} vs point-to-point {p2p}");
}

#[test]
fn synth_writes_a_dataset_that_run_reads() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ow");
    run_ok(&["synth", "--scene", "builtin:oblique-wall", "-o", s(&out)]);
    let pngs = fs::read_dir(out.join("depth")).unwrap().count();
    assert_eq!(pngs, 6);
    let gt = fs::read_to_string(out.join("groundtruth.txt")).unwrap();
    assert_eq!(gt.lines().filter(|l| !l.starts_with('#')).count(), 6);

    let res = tmp.path().join("res");
    run_ok(&[
        "run",
        "--dataset",
        s(&out),
        "--config",
        s(&out.join("camera.cfg")),
        "--method",
        "icp-p2plane",
        "-o",
        s(&res),
    ]);
    assert_eq!(fs::read_to_string(res.join("records.csv")).unwrap().lines().count(), 6);
}

#[test]
fn synth_rejects_zero_frames_and_reports_parse_location() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.scene");
    fs::write(&empty, "camera tum-fr3 width=320 height=240\nplane point=0,1,0 normal=0,-1,0\n").unwrap();
    let err = run_err(&["synth", "--scene", s(&empty), "-o", s(&tmp.path().join("a"))]);
    assert!(err.contains("no frames"), "{err}");
    let bad = tmp.path().join("bad.scene");
    fs::write(&bad, "camera tum-fr3 width=320 height=240\nplane point=0,1,0 normal=0,-1\n").unwrap();
    let err = run_err(&["synth", "--scene", s(&bad), "-o", s(&tmp.path().join("b"))]);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn synth_is_byte_identical_for_the_same_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        run_ok(&[
            "synth",
            "--scene",
            "builtin:oblique-wall",
            "--seed",
            seed,
            "--set",
            "noise_sigma=0.003",
            "-o",
            s(&out),
        ]);
        files(&out)
            .into_iter()
            .filter(|(p, _)| p != Path::new("config_resolved"))
            .collect::<Vec<_>>()
    };
    let a = gen("a", "5");
    let b = gen("b", "5");
    let c = gen("c", "6");
    assert!(a.len() > 6);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn config_resolved_reproduces_records_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    run_ok(&[
        "run",
        "--scene",
        "builtin:room",
        "--seconds",
        "2",
        "--threads",
        "2",
        "--set",
        "eps=0.12",
        "-o",
        s(&first),
    ]);
    let resolved = first.join("config_resolved");
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("eps = 0.12") && text.contains("method = rendermap") && text.contains("threads = 2"));

    let second = tmp.path().join("second");
    run_ok(&["run", "--config", s(&resolved), "-o", s(&second)]);
    let a = fs::read(first.join("records.csv")).unwrap();
    let b = fs::read(second.join("records.csv")).unwrap();
    assert_eq!(fs::read_to_string(first.join("records.csv")).unwrap().lines().count(), 3);
    assert_eq!(a, b);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "scene = builtin:room\nmethod = icp-p2point\ninterval = 3\n").unwrap();
    let out = tmp.path().join("o");
    run_ok(&["run", "--config", s(&cfg), "--method", "icp-p2plane", "-o", s(&out)]);
    let text = fs::read_to_string(out.join("config_resolved")).unwrap();
    assert!(text.contains("method = icp-p2plane"), "{text}");
    assert!(text.contains("interval = 3\n"), "{text}");
    let csv = fs::read_to_string(out.join("records.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains("icp-p2plane"));
}

#[test]
fn diverged_pairs_are_data_not_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    // a 1 cm basin flags every room pair as diverged
    run_ok(&[
        "run",
        "--scene",
        "builtin:room",
        "--method",
        "icp-p2plane",
        "--set",
        "icp_basin_translation=0.01",
        "--seconds",
        "3",
        "-o",
        s(&out),
    ]);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert_eq!(field(&summary, "diverged")[0], 3.0, "{summary}");
}

#[test]
fn render_debug_dumps_meshes_and_images() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rd");
    let o = run_ok(&[
        "render-debug",
        "--scene",
        "builtin:table-corner",
        "--pair",
        "0",
        "1",
        "--pose",
        "0,0,0.05,0,0,-2",
        "-o",
        s(&out),
    ]);
    for f in [
        "map_mesh.ply",
        "scan_mesh.ply",
        "map_depth.png",
        "scan_depth.png",
        "map_render.png",
        "scan_render.png",
        "classification.png",
        "cost.txt",
        "config_resolved",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let ply = fs::read_to_string(out.join("map_mesh.ply")).unwrap();
    assert!(ply.starts_with("ply"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("total"));
}

#[test]
fn warm_start_and_threads_flags_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    run_ok(&[
        "run",
        "--scene",
        "builtin:room",
        "--method",
        "icp-p2plane",
        "--warm-start",
        "--threads",
        "3",
        "-o",
        s(&out),
    ]);
    let text = fs::read_to_string(out.join("config_resolved")).unwrap();
    assert!(text.contains("warm_start = true") && text.contains("threads = 3"));
}
