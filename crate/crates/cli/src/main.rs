use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rendermap::pipeline::Method;

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "rendermap", version, about = "Depth scan alignment by rendering labeled interface meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match every frame pair of a sequence and write records and drift statistics.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Align one frame pair and write the pose, cost trace and diagnostic images.
    AlignPair {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: PairArgs,
        /// Initial pose of the scan in the map frame: x,y,z in meters, then rotations in degrees.
        #[arg(long, value_name = "X,Y,Z,RX,RY,RZ", allow_hyphen_values = true)]
        x0: Option<String>,
    },
    /// Render a scene file into a dataset directory (depth PNGs + groundtruth.txt).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Dump meshes, renders and the classification image for one pair at a given pose.
    RenderDebug {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: PairArgs,
        /// Pose of the scan in the map frame: x,y,z in meters, then rotations in degrees.
        #[arg(long, value_name = "X,Y,Z,RX,RY,RZ", allow_hyphen_values = true)]
        pose: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dataset directory (depth.txt, depth/, groundtruth.txt).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Scene file, or builtin:NAME (room, oblique-wall, table-corner, ground).
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    method: Option<Method>,
    /// Minimum time between paired frames, seconds.
    #[arg(long)]
    interval: Option<f64>,
    /// Use only the first this many seconds.
    #[arg(long)]
    seconds: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Seed each pair with the previous pair's estimate.
    #[arg(long)]
    warm_start: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Scene noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Set any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct PairArgs {
    /// Frame indices into the dataset or scene.
    #[arg(long, num_args = 2, value_names = ["FROM", "TO"], conflicts_with = "frames")]
    pair: Option<Vec<usize>>,
    /// Two depth PNGs: map then scan.
    #[arg(long, num_args = 2, value_names = ["MAP", "SCAN"])]
    frames: Option<Vec<PathBuf>>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags: [(&str, Option<String>); 8] = [
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string())),
            ("scene", self.scene.clone()),
            ("method", self.method.map(|m| m.to_string())),
            ("interval", self.interval.map(|v| v.to_string())),
            ("seconds", self.seconds.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("output", self.output.as_ref().map(|p| p.display().to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if self.warm_start {
            cfg.warm_start = true;
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        // absolute paths keep config_resolved valid from any directory
        cfg.output = std::path::absolute(&cfg.output).context("cannot resolve output path")?;
        if let Some(d) = &cfg.dataset {
            cfg.dataset = Some(std::path::absolute(d).context("cannot resolve dataset path")?);
        }
        if let Some(s) = &cfg.scene {
            if !s.starts_with(commands::BUILTIN_PREFIX) {
                cfg.scene = Some(std::path::absolute(s).context("cannot resolve scene path")?.display().to_string());
            }
        }
        Ok(cfg)
    }
}

impl PairArgs {
    fn selection(&self) -> commands::PairSelection {
        match (&self.pair, &self.frames) {
            (Some(p), _) => commands::PairSelection::Indices(p[0], p[1]),
            (None, Some(f)) => commands::PairSelection::Files(f[0].clone(), f[1].clone()),
            (None, None) => commands::PairSelection::Indices(0, 1),
        }
    }
}

fn parse_pose(flag: &str, s: &str) -> Result<[f64; 6]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("{flag} `{s}`: not a number list"))?;
    let Ok(mut a) = <[f64; 6]>::try_from(v) else {
        bail!("{flag} needs six comma-separated values");
    };
    for r in &mut a[3..] {
        *r = r.to_radians();
    }
    Ok(a)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common } => commands::run(&common.resolve()?),
        Command::AlignPair { common, pair, x0 } => {
            let x0 = x0.as_deref().map(|s| parse_pose("--x0", s)).transpose()?.unwrap_or([0.0; 6]);
            commands::align_pair(&common.resolve()?, &pair.selection(), x0)
        }
        Command::Synth { common } => commands::synth(&common.resolve()?),
        Command::RenderDebug { common, pair, pose } => {
            let pose = pose.as_deref().map(|s| parse_pose("--pose", s)).transpose()?.unwrap_or([0.0; 6]);
            commands::render_debug(&common.resolve()?, &pair.selection(), pose)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already embed their source text
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
