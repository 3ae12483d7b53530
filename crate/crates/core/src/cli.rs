//! Command-line front end: `simulate`, `reconstruct`, `train`, `eval`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analytic::{analytic_reconstruct, Window};
use crate::classical::{sirt_logged, tv_reconstruct, IterConfig};
use crate::error::Error;
use crate::geometry::Geometry;
use crate::io::{
    export_center_slices, load_sinogram, load_volume, load_volume_with_sidecar, quantize, save_sinogram,
    save_volume_tagged,
};
use crate::metrics::{evaluate, MetricsReport};
use crate::net::NetArch;
use crate::ode::{reconstruct_node, OdeConfig};
use crate::phantoms::{make_phantom, simulate_measurement, NoiseModel, PhantomSpec};
use crate::training::{fov_mask, train_resume, ResumeState, Sample, TrainConfig};
use crate::volume::{Volume, VolumeGrid};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ctnode", version, about = "Learned iterative CT reconstruction")]
pub struct Cli {
    /// Worker threads; 1 gives bitwise-reproducible output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom and its simulated measurement.
    Simulate(SimulateArgs),
    /// Reconstruct a volume from a sinogram file.
    Reconstruct(ReconstructArgs),
    /// Train the learned reconstruction.
    Train(TrainArgs),
    /// Compare a reconstruction against a reference volume.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fbp,
    Fdk,
    Sirt,
    Tv,
    Node,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Fbp => "fbp",
            Method::Fdk => "fdk",
            Method::Sirt => "sirt",
            Method::Tv => "tv",
            Method::Node => "node",
        }
    }
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub sinogram: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reconstruction grid, e.g. `64,64`. Defaults to the grid recorded
    /// with the sinogram.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1.0)]
    pub voxel_size: f64,
    /// Ground truth for metrics.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Write center-slice PGM images.
    #[arg(long)]
    pub export_slices: bool,
    #[arg(long, default_value = "hann")]
    pub window: Window,
    /// Iterations for sirt/tv (default 200 and 150).
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub tv_weight: f64,
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Trained `.params` file; its `.json` sidecar must sit next to it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use a freshly initialized network instead of a checkpoint.
    #[arg(long)]
    pub untrained: bool,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Network architecture JSON for --untrained.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// ODE configuration JSON for --untrained.
    #[arg(long)]
    pub ode: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoints already in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub recon: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Evaluate over the whole grid instead of the scan FOV.
    #[arg(long)]
    pub no_fov_mask: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: msg.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::InvalidGeometry(_) | Error::Json(_) => EXIT_CONFIG,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_CONFIG,
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Context wrapper that keeps the exit-code class of the error.
fn at<T>(path: &Path, r: crate::error::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    text.push('\n');
    at(path, std::fs::write(path, text).map_err(Error::from))
}

fn create_out(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| config_err(format!("{}: {e}", out.display())))
}

fn manifest(command: &str, threads: Option<usize>, body: Value) -> Value {
    let mut m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": threads,
        "parallel_build": cfg!(feature = "parallel"),
    });
    if let (Value::Object(m), Value::Object(b)) = (&mut m, body) {
        m.extend(b);
    }
    m
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_CONFIG;
        }
        crate::par::set_threads(n);
    }
    let threads = cli.threads;
    let r = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, threads),
        Command::Reconstruct(a) => cmd_reconstruct(&a, threads),
        Command::Train(a) => cmd_train(&a, threads),
        Command::Eval(a) => cmd_eval(&a, threads),
    };
    match r {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// `simulate` input.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub phantom: PhantomSpec,
    pub geometry: Geometry,
    #[serde(default)]
    pub noise: NoiseModel,
    /// Noise seed; the phantom has its own.
    #[serde(default)]
    pub seed: u64,
}

pub const PHANTOM_FILE: &str = "phantom.ctv";
pub const SINOGRAM_FILE: &str = "sinogram.cts";
pub const RECON_FILE: &str = "recon.ctv";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn cmd_simulate(a: &SimulateArgs, threads: Option<usize>) -> CliResult<()> {
    let cfg: SimulateConfig = read_config(&a.config)?;
    cfg.noise
        .validate()
        .map_err(|e| config_err(format!("{}: noise: {e}", a.config.display())))?;
    if cfg.geometry.dims() != cfg.phantom.size.len() {
        return Err(config_err(format!(
            "{}: phantom size has {} dims but the geometry is {}D",
            a.config.display(),
            cfg.phantom.size.len(),
            cfg.geometry.dims()
        )));
    }
    let x = make_phantom(&cfg.phantom).map_err(|e| config_err(format!("{}: phantom: {e}", a.config.display())))?;
    let p = simulate_measurement(&x, &cfg.geometry, &cfg.noise, cfg.seed)?;
    create_out(&a.out)?;
    let vol_path = a.out.join(PHANTOM_FILE);
    at(&vol_path, save_volume_tagged(&vol_path, &x, None, Some(&cfg.geometry)))?;
    let sino_path = a.out.join(SINOGRAM_FILE);
    at(&sino_path, save_sinogram(&sino_path, &p, Some(&x.grid)))?;
    let m = manifest(
        "simulate",
        threads,
        json!({
            "config": cfg,
            "angular_increment_deg": cfg.geometry.angular_increment().to_degrees(),
            "outputs": {"volume": PHANTOM_FILE, "sinogram": SINOGRAM_FILE},
        }),
    );
    write_json(&a.out.join(MANIFEST_FILE), &m)
}

fn recon_grid(a: &ReconstructArgs, stored: Option<VolumeGrid>) -> CliResult<VolumeGrid> {
    match (&a.grid, stored) {
        (Some(shape), _) => VolumeGrid::new(shape, a.voxel_size).map_err(|e| config_err(format!("--grid: {e}"))),
        (None, Some(g)) => Ok(g),
        (None, None) => Err(config_err("sinogram has no recorded grid; pass --grid")),
    }
}

fn cmd_reconstruct(a: &ReconstructArgs, threads: Option<usize>) -> CliResult<()> {
    if a.method == Method::Node && a.checkpoint.is_none() && !a.untrained {
        return Err(config_err("method node needs --checkpoint or --untrained"));
    }
    if a.checkpoint.is_some() && a.untrained {
        return Err(config_err("--checkpoint and --untrained are mutually exclusive"));
    }
    let (p, stored) = at(&a.sinogram, load_sinogram(&a.sinogram))?;
    let grid = recon_grid(a, stored)?;
    if grid.dims() != p.geom.dims() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!("grid is {}D but the sinogram geometry is {}D", grid.dims(), p.geom.dims()),
        });
    }
    match (a.method, &p.geom) {
        (Method::Fbp, Geometry::Cone(_)) => return Err(config_err("fbp needs a fan-beam sinogram; use fdk")),
        (Method::Fdk, Geometry::Fan(_)) => return Err(config_err("fdk needs a cone-beam sinogram; use fbp")),
        _ => {}
    }
    let reference = match &a.reference {
        Some(path) => {
            let r = at(path, load_volume(path))?;
            at(path, r.ensure_same_shape(&Volume::zeros(&grid)))?;
            Some(r)
        }
        None => None,
    };
    create_out(&a.out)?;

    let mut extra = serde_json::Map::new();
    let started = Instant::now();
    let volume = match a.method {
        Method::Fbp | Method::Fdk => analytic_reconstruct(&p, &grid, a.window)?,
        Method::Sirt | Method::Tv => {
            let cfg = if a.method == Method::Sirt {
                IterConfig {
                    step_size: a.step_size,
                    ..IterConfig::sirt(a.iters.unwrap_or(200))
                }
            } else {
                IterConfig {
                    step_size: a.step_size,
                    ..IterConfig::tv(a.iters.unwrap_or(150), a.tv_weight)
                }
            };
            let res = if a.method == Method::Sirt {
                sirt_logged(&p, &grid, &cfg, None, reference.as_ref())?
            } else {
                tv_reconstruct(&p, &grid, &cfg, None, reference.as_ref())?
            };
            let log_path = a.out.join("iterations.csv");
            at(&log_path, res.write_csv(&log_path))?;
            extra.insert("iter_config".into(), json!(cfg));
            res.volume
        }
        Method::Node => {
            let (arch, params, gamma, ode, window) = if let Some(ck) = &a.checkpoint {
                let dir = ck.parent().unwrap_or(Path::new("."));
                let stem = ck
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| config_err(format!("{}: bad checkpoint path", ck.display())))?;
                let c = at(ck, crate::training::Checkpoint::load(dir, stem))?;
                (c.meta.arch, c.params, c.meta.gamma, c.meta.ode, c.meta.train.window)
            } else {
                let arch = match &a.arch {
                    Some(path) => read_config(path)?,
                    None => NetArch {
                        dims: grid.dims(),
                        ..NetArch::default()
                    },
                };
                let ode: OdeConfig = match &a.ode {
                    Some(path) => read_config(path)?,
                    None => OdeConfig::default(),
                };
                let net = arch.build().map_err(|e| config_err(format!("arch: {e}")))?;
                (arch, net.init_params(a.seed), a.gamma, ode, a.window)
            };
            let net = arch.build().map_err(|e| config_err(format!("arch: {e}")))?;
            extra.insert("arch".into(), json!(arch));
            extra.insert("ode".into(), json!(ode));
            extra.insert("gamma".into(), json!(gamma));
            reconstruct_node(&p, &grid, &net, &params, gamma, &ode, window)?
        }
    };
    let runtime = started.elapsed().as_secs_f64();
    // metrics describe the stored (f32) volume, as `eval` would see it
    let stored = Volume::from_vec(&grid, quantize(&volume.data))?;
    if !stored.is_finite() {
        return Err(Failure {
            code: EXIT_DIVERGENCE,
            message: format!("{} reconstruction overflows single precision", a.method.name()),
        });
    }
    let recon_path = a.out.join(RECON_FILE);
    at(&recon_path, save_volume_tagged(&recon_path, &volume, Some(a.method.name()), Some(&p.geom)))?;
    let mut outputs = vec![RECON_FILE.to_string()];
    if let Some(r) = &reference {
        let mask = fov_mask(&grid, &p.geom);
        let report = evaluate(a.method.name(), &stored, r, Some(&mask), runtime)?;
        write_json(&a.out.join(METRICS_FILE), &report)?;
        outputs.push(METRICS_FILE.into());
    }
    if a.export_slices {
        for f in at(&a.out, export_center_slices(&a.out, "recon", &stored))? {
            outputs.push(f.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    if matches!(a.method, Method::Sirt | Method::Tv) {
        outputs.push("iterations.csv".into());
    }
    let mut body = json!({
        "method": a.method,
        "sinogram": a.sinogram,
        "reference": a.reference,
        "checkpoint": a.checkpoint,
        "untrained": a.untrained,
        "seed": a.seed,
        "window": a.window,
        "grid": grid,
        "outputs": outputs,
    });
    if let Value::Object(b) = &mut body {
        b.extend(extra);
    }
    write_json(&a.out.join(MANIFEST_FILE), &manifest("reconstruct", threads, body))
}

/// `train` input. Sample entries are `simulate` manifests; relative paths
/// resolve against the config file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub train_samples: Vec<PathBuf>,
    pub val_samples: Vec<PathBuf>,
    #[serde(default)]
    pub arch: NetArch,
    #[serde(default)]
    pub ode: OdeConfig,
    pub train: TrainConfig,
}

/// Loads a (phantom, sinogram) pair from a `simulate` manifest.
pub fn load_sample(manifest_path: &Path) -> CliResult<Sample> {
    let m: Value = read_config(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let file = |key: &str| -> CliResult<PathBuf> {
        m["outputs"][key]
            .as_str()
            .map(|s| dir.join(s))
            .ok_or_else(|| config_err(format!("{}: no outputs.{key}", manifest_path.display())))
    };
    let (vp, sp) = (file("volume")?, file("sinogram")?);
    for p in [&vp, &sp] {
        if !p.exists() {
            return Err(config_err(format!("{}: file not found", p.display())));
        }
    }
    let target = at(&vp, load_volume(&vp))?;
    let (sinogram, _) = at(&sp, load_sinogram(&sp))?;
    Ok(Sample { sinogram, target })
}

fn cmd_train(a: &TrainArgs, threads: Option<usize>) -> CliResult<()> {
    let mut cfg: TrainFileConfig = read_config(&a.config)?;
    if cfg.train_samples.is_empty() || cfg.val_samples.is_empty() {
        return Err(config_err(format!(
            "{}: train_samples and val_samples must be non-empty",
            a.config.display()
        )));
    }
    let base = a.config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    let train_set = cfg.train_samples.iter().map(|p| load_sample(&resolve(p))).collect::<CliResult<Vec<_>>>()?;
    let val_set = cfg.val_samples.iter().map(|p| load_sample(&resolve(p))).collect::<CliResult<Vec<_>>>()?;
    create_out(&a.out)?;
    cfg.train.checkpoint_dir = Some(a.out.clone());
    let resume = if a.resume {
        Some(at(&a.out, ResumeState::load(&a.out))?)
    } else {
        None
    };
    let outcome = train_resume(&train_set, &val_set, &cfg.arch, &cfg.ode, &cfg.train, resume)?;
    println!(
        "selected epoch {} with validation loss {:e} (gamma {:e})",
        outcome.best.meta.epoch, outcome.best.meta.val_loss, outcome.best.meta.gamma
    );
    cfg.train.checkpoint_dir = None;
    let body = json!({
        "config": cfg,
        "resumed": a.resume,
        "selected_epoch": outcome.best.meta.epoch,
        "selected_val_loss": outcome.best.meta.val_loss,
        "outputs": ["best.params", "best.json", "last.params", "last.json", "adam.json", "history.json", "history.csv"],
    });
    write_json(&a.out.join(MANIFEST_FILE), &manifest("train", threads, body))
}

fn cmd_eval(a: &EvalArgs, threads: Option<usize>) -> CliResult<()> {
    let (recon, side) = at(&a.recon, load_volume_with_sidecar(&a.recon))?;
    let (reference, ref_side) = at(&a.reference, load_volume_with_sidecar(&a.reference))?;
    at(&a.recon, recon.ensure_same_shape(&reference))?;
    let mask = if a.no_fov_mask {
        None
    } else {
        let geom = side.geometry.or(ref_side.geometry).ok_or_else(|| {
            config_err("neither volume records a geometry for the FOV mask; pass --no-fov-mask")
        })?;
        Some(fov_mask(&recon.grid, &geom))
    };
    let method = side.method.unwrap_or_else(|| "unknown".into());
    let report: MetricsReport = evaluate(&method, &recon, &reference, mask.as_ref(), 0.0)?;
    create_out(&a.out)?;
    write_json(&a.out.join(METRICS_FILE), &report)?;
    let body = json!({
        "recon": a.recon,
        "reference": a.reference,
        "fov_mask": !a.no_fov_mask,
        "outputs": [METRICS_FILE],
    });
    write_json(&a.out.join(MANIFEST_FILE), &manifest("eval", threads, body))
}
