//! Run configuration: a `key = value` file, overridden by flags, and written
//! back in full as `config_resolved`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rendermap::cost::CostOptions;
use rendermap::geometry::CameraModel;
use rendermap::icp::IcpOptions;
use rendermap::meshify::MeshifyOptions;
use rendermap::optimize::{AlignOptions, OptimizerOptions};
use rendermap::pipeline::{Method, RunOptions};

/// File name written into every output directory.
pub const RESOLVED_NAME: &str = "config_resolved";

/// A config value that round-trips through text.
trait Value: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! value_via_fromstr {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                if s.is_empty() {
                    return Err("needs a value".into());
                }
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
value_via_fromstr!(f64, usize, u64, String, Method);

impl Value for bool {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            _ => Err(format!("expected true or false, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for PathBuf {
    fn parse(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Err("needs a value".into());
        }
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

// empty means unset
impl<V: Value> Value for Option<V> {
    fn parse(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            V::parse(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map(V::render).unwrap_or_default()
    }
}

macro_rules! config {
    (($opt:ident, $icp:ident, $cam:ident) $($(#[doc = $doc:literal])* $key:ident: $ty:ty = $default:expr;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                let $opt = OptimizerOptions::<f64>::default();
                let $icp = IcpOptions::<f64>::default();
                let $cam = CameraModel::<f64>::tum_fr3();
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = Value::parse(value)
                            .map_err(|e| anyhow::anyhow!("`{key}`: {e}"))?;
                    })*
                    _ => bail!("unknown config key `{key}`; known keys: {}", Self::KEYS.join(", ")),
                }
                Ok(())
            }

            /// Every key with its effective value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.render())),*]
            }
        }
    };
}

config! {
    (opt, icp, cam)
    /// TUM-layout dataset directory.
    dataset: Option<PathBuf> = None;
    /// Scene file, or `builtin:NAME` for a canned scene.
    scene: Option<String> = None;
    method: Method = Method::RenderMap;
    /// Minimum pairing gap, seconds.
    interval: f64 = 1.0;
    /// Only use the first this many seconds of a dataset.
    seconds: Option<f64> = None;
    warm_start: bool = false;
    threads: usize = 1;
    output: PathBuf = PathBuf::from("out");
    /// Overrides the scene's noise seed.
    seed: Option<u64> = None;
    /// Overrides the scene's noise sigma, meters.
    noise_sigma: Option<f64> = None;
    /// PNG units per meter.
    depth_scale: f64 = rendermap::io::TUM_DEPTH_SCALE;
    /// Dataset intrinsics, given at `width` x `height` and scaled to the
    /// actual frame size.
    width: usize = cam.width;
    height: usize = cam.height;
    fx: f64 = cam.fx;
    fy: f64 = cam.fy;
    cx: f64 = cam.cx;
    cy: f64 = cam.cy;
    z_near: f64 = cam.z_near;
    z_far: f64 = cam.z_far;
    /// Rendermap working resolution; frames are subsampled to it.
    render_width: usize = 320;
    render_height: usize = 240;
    eps: f64 = rendermap::cost::DEFAULT_EPS;
    max_range: f64 = rendermap::meshify::DEFAULT_MAX_RANGE;
    discontinuity: f64 = rendermap::meshify::DEFAULT_DISCONTINUITY;
    /// Scan blur before meshing, pixels.
    blur_sigma: Option<f64> = None;
    eval_budget: usize = opt.eval_budget;
    gd_evals: usize = opt.gd_evals;
    nm_evals: usize = opt.nm_evals;
    cd_evals: usize = opt.cd_evals;
    simplex_translation: f64 = opt.simplex_translation;
    simplex_rotation_deg: f64 = 1.0;
    translation_step: f64 = opt.translation_step;
    rotation_step_deg: f64 = 0.25;
    cd_translation_resolution: f64 = opt.cd_translation_resolution;
    cd_rotation_resolution_deg: f64 = 0.025;
    angle_scale: f64 = opt.angle_scale;
    convergence_tol: f64 = opt.convergence_tol;
    min_overlap_ratio: f64 = opt.min_overlap_ratio;
    icp_max_iterations: usize = icp.max_iterations;
    icp_z_tolerance: f64 = icp.z_tolerance;
    icp_rejection_threshold: f64 = icp.rejection_threshold;
    icp_translation_eps: f64 = icp.translation_eps;
    icp_rotation_eps: f64 = icp.rotation_eps;
    icp_downsample: usize = icp.downsample_factor;
    icp_normal_sigma: f64 = icp.normal_sigma;
    icp_use_render: bool = icp.use_render;
    icp_basin_translation: f64 = icp.basin_translation;
    icp_basin_rotation_deg: f64 = 20.0;
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Keys may appear once.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{}:{}", origin.display(), n + 1);
            let Some((k, v)) = line.split_once('=') else {
                bail!("{}: expected `key = value`", at());
            };
            let k = k.trim();
            if seen.contains(&k) {
                bail!("{}: `{k}` given twice", at());
            }
            seen.push(k);
            cfg.set(k, v.trim()).with_context(at)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# effective parameters; pass back with --config to reproduce\n");
        for (k, v) in self.entries() {
            if v.is_empty() {
                writeln!(s, "{k} =").unwrap();
            } else {
                writeln!(s, "{k} = {v}").unwrap();
            }
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_text()).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    /// Checks value ranges. `need_source` additionally requires exactly one
    /// of `dataset` and `scene`.
    pub fn validate(&self, need_source: bool) -> Result<()> {
        match (&self.dataset, &self.scene) {
            (Some(_), Some(_)) => bail!("config gives both `dataset` and `scene`; use exactly one"),
            (None, None) if need_source => bail!("config needs one of `dataset` or `scene`"),
            _ => {}
        }
        let positive = [
            ("interval", self.interval),
            ("depth_scale", self.depth_scale),
            ("fx", self.fx),
            ("fy", self.fy),
            ("z_near", self.z_near),
            ("eps", self.eps),
            ("max_range", self.max_range),
            ("discontinuity", self.discontinuity),
            ("icp_z_tolerance", self.icp_z_tolerance),
            ("icp_rejection_threshold", self.icp_rejection_threshold),
            ("icp_translation_eps", self.icp_translation_eps),
            ("icp_rotation_eps", self.icp_rotation_eps),
            ("icp_normal_sigma", self.icp_normal_sigma),
            ("icp_basin_translation", self.icp_basin_translation),
            ("icp_basin_rotation_deg", self.icp_basin_rotation_deg),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                bail!("`{k}` must be positive, got {v}");
            }
        }
        for (k, v) in [("seconds", self.seconds), ("blur_sigma", self.blur_sigma)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    bail!("`{k}` must be positive, got {v}");
                }
            }
        }
        if let Some(s) = self.noise_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                bail!("`noise_sigma` must be non-negative, got {s}");
            }
        }
        for (k, v) in [
            ("threads", self.threads),
            ("render_width", self.render_width),
            ("render_height", self.render_height),
            ("icp_max_iterations", self.icp_max_iterations),
            ("icp_downsample", self.icp_downsample),
        ] {
            if v == 0 {
                bail!("`{k}` must be at least 1");
            }
        }
        self.camera()?;
        self.align_options().optimizer.validate()?;
        Ok(())
    }

    /// Dataset camera at the configured `width` x `height`.
    pub fn camera(&self) -> Result<CameraModel<f64>> {
        Ok(CameraModel::new(
            self.width,
            self.height,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.z_near,
            self.z_far,
        )?)
    }

    pub fn align_options(&self) -> AlignOptions<f64> {
        AlignOptions {
            cost: CostOptions {
                eps: self.eps,
                blur_sigma: self.blur_sigma,
                ..CostOptions::default()
            },
            mesh: MeshifyOptions {
                max_range: self.max_range,
                discontinuity: self.discontinuity,
            },
            optimizer: OptimizerOptions {
                eval_budget: self.eval_budget,
                gd_evals: self.gd_evals,
                nm_evals: self.nm_evals,
                cd_evals: self.cd_evals,
                simplex_translation: self.simplex_translation,
                simplex_rotation: self.simplex_rotation_deg.to_radians(),
                translation_step: self.translation_step,
                rotation_step: self.rotation_step_deg.to_radians(),
                cd_translation_resolution: self.cd_translation_resolution,
                cd_rotation_resolution: self.cd_rotation_resolution_deg.to_radians(),
                angle_scale: self.angle_scale,
                convergence_tol: self.convergence_tol,
                min_overlap_ratio: self.min_overlap_ratio,
            },
            trace: false,
        }
    }

    pub fn icp_options(&self) -> IcpOptions<f64> {
        IcpOptions {
            max_iterations: self.icp_max_iterations,
            z_tolerance: self.icp_z_tolerance,
            rejection_threshold: self.icp_rejection_threshold,
            translation_eps: self.icp_translation_eps,
            rotation_eps: self.icp_rotation_eps,
            downsample_factor: self.icp_downsample,
            max_range: self.max_range,
            normal_sigma: self.icp_normal_sigma,
            use_render: self.icp_use_render,
            basin_translation: self.icp_basin_translation,
            basin_rotation: self.icp_basin_rotation_deg.to_radians(),
        }
    }

    pub fn run_options(&self) -> RunOptions<f64> {
        RunOptions {
            method: self.method,
            interval: self.interval,
            warm_start: self.warm_start,
            threads: self.threads,
            align: self.align_options(),
            icp: self.icp_options(),
        }
    }
}
