//! End-to-end training of the regularizer weights `θ` and the data
//! consistency weight `γ` through the ODE solver.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::{analytic_reconstruct, Window};
use crate::error::{invalid, Error, Result};
use crate::geometry::Geometry;
use crate::net::{load_params, save_params, NetArch, NetParams, Network};
use crate::ode::{NodeReconstructor, OdeConfig};
use crate::projector::Sinogram;
use crate::volume::{Volume, VolumeGrid};

/// Radius (mm) of the largest axis-centered disk seen by every projection.
fn scan_radius(geom: &Geometry) -> f64 {
    let (sd, dd, half_width) = match geom {
        Geometry::Fan(g) => (
            g.source_distance,
            g.detector_distance,
            0.5 * g.n_detectors as f64 * g.detector_pixel_size,
        ),
        Geometry::Cone(g) => (
            g.source_distance,
            g.detector_distance,
            0.5 * g.detector_cols as f64 * g.detector_pixel_size,
        ),
    };
    sd * (half_width / (sd + dd)).atan().sin()
}

/// Binary mask of voxels lying entirely inside the cylindrical field of
/// view: the inscribed disk (2D) or cylinder (3D) covered by every
/// projection, clipped to the grid's own inscribed disk.
pub fn fov_mask(grid: &VolumeGrid, geom: &Geometry) -> Volume {
    let s = grid.voxel_size;
    let lateral = 0.5 * s * grid.nx().min(grid.ny()) as f64;
    let r = scan_radius(geom).min(lateral);
    let half_height = match geom {
        Geometry::Cone(g) if grid.dims() == 3 => {
            let tan_k = 0.5 * g.detector_rows as f64 * g.detector_pixel_size
                / (g.source_distance + g.detector_distance);
            Some((g.trajectory_height, (g.source_distance - r) * tan_k))
        }
        _ => None,
    };
    let mut mask = Volume::zeros(grid);
    for iz in 0..grid.nz() {
        for iy in 0..grid.ny() {
            for ix in 0..grid.nx() {
                let [x, y, z] = grid.voxel_position(ix, iy, iz);
                let (ex, ey) = (x.abs() + 0.5 * s, y.abs() + 0.5 * s);
                let mut inside = ex * ex + ey * ey <= r * r;
                if let Some((h, hh)) = half_height {
                    inside &= (z - h).abs() + 0.5 * s <= hh;
                }
                if inside {
                    mask.data[grid.index(ix, iy, iz)] = 1.0;
                }
            }
        }
    }
    mask
}

fn mask_weight(pred: &Volume, target: &Volume, mask: &Volume) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    pred.ensure_same_shape(mask)?;
    let w: f64 = mask.data.iter().sum();
    if w <= 0.0 {
        return Err(invalid("mask is empty"));
    }
    Ok(w)
}

/// Mean absolute error over masked voxels.
pub fn l1_fov_loss(pred: &Volume, target: &Volume, mask: &Volume) -> Result<f64> {
    let w = mask_weight(pred, target, mask)?;
    let s: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .zip(&mask.data)
        .map(|((p, t), m)| m * (p - t).abs())
        .sum();
    Ok(s / w)
}

/// Gradient of [`l1_fov_loss`] with respect to `pred` (sign(0) = 0).
pub fn l1_fov_grad(pred: &Volume, target: &Volume, mask: &Volume) -> Result<Vec<f64>> {
    let w = mask_weight(pred, target, mask)?;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .zip(&mask.data)
        .map(|((p, t), m)| {
            let d = p - t;
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            m * s / w
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `blocks` lists `(length, lr)` runs that
/// tile the parameter vector.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    blocks: &[(usize, f64)],
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(invalid("adam: parameter, gradient and state lengths differ"));
    }
    if blocks.iter().map(|b| b.0).sum::<usize>() != n {
        return Err(invalid("adam: learning-rate blocks do not cover the parameters"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut i = 0;
    for &(len, lr) in blocks {
        for j in i..i + len {
            let g = grads[j];
            state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * g;
            state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[j] / bc1;
            let v_hat = state.v[j] / bc2;
            params[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        i += len;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    pub lr_net: f64,
    pub lr_gamma: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    #[serde(default = "gamma_init")]
    pub gamma_init: f64,
    /// Global gradient-norm clip applied before Adam.
    #[serde(default = "one_f")]
    pub clip_norm: f64,
    #[serde(default = "hann")]
    pub window: Window,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn gamma_init() -> f64 {
    0.01
}
fn hann() -> Window {
    Window::Hann
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            lr_net: 1e-4,
            lr_gamma: 1e-2,
            adam: AdamConfig::default(),
            seed: 0,
            gamma_init: 0.01,
            clip_norm: 1.0,
            window: Window::Hann,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(invalid("batch_size must be 1"));
        }
        if !(self.lr_net > 0.0 && self.lr_gamma > 0.0) {
            return Err(invalid("learning rates must be > 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid("clip_norm must be > 0"));
        }
        Ok(())
    }
}

/// One training/validation pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub sinogram: Sinogram,
    pub target: Volume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub mean_val_loss: f64,
    pub gamma: f64,
    pub adam_step: u64,
    pub updates: usize,
    pub diverged: usize,
    pub clipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation loss of the untrained model.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,mean_train_loss,mean_val_loss,gamma,adam_step")?;
        for r in &self.epochs {
            writeln!(
                f,
                "{},{:e},{:e},{:e},{}",
                r.epoch, r.mean_train_loss, r.mean_val_loss, r.gamma, r.adam_step
            )?;
        }
        Ok(())
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .filter(|r| r.mean_val_loss.is_finite())
            .min_by(|a, b| a.mean_val_loss.total_cmp(&b.mean_val_loss))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub gamma: f64,
    pub epoch: usize,
    pub val_loss: f64,
    pub arch: NetArch,
    pub ode: OdeConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetParams,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Writes `<stem>.params` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_params(&dir.join(format!("{stem}.params")), &self.meta.arch, &self.params)?;
        let f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
        serde_json::to_writer_pretty(f, &self.meta)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (arch, params) = load_params(&dir.join(format!("{stem}.params")))?;
        let f = std::fs::File::open(dir.join(format!("{stem}.json")))?;
        let meta: CheckpointMeta = serde_json::from_reader(f)?;
        if meta.arch != arch {
            return Err(Error::Format("checkpoint sidecar and parameter file disagree".into()));
        }
        Ok(Self { params, meta })
    }
}

/// Everything needed to continue an interrupted run.
#[derive(Clone, Debug)]
pub struct ResumeState {
    pub last: Checkpoint,
    pub adam: AdamState,
    pub history: TrainHistory,
    pub best: Checkpoint,
}

impl ResumeState {
    pub fn load(dir: &Path) -> Result<Self> {
        let last = Checkpoint::load(dir, "last")?;
        let best = Checkpoint::load(dir, "best")?;
        let adam: AdamState = serde_json::from_reader(std::fs::File::open(dir.join("adam.json"))?)?;
        let history: TrainHistory =
            serde_json::from_reader(std::fs::File::open(dir.join("history.json"))?)?;
        Ok(Self {
            last,
            adam,
            history,
            best,
        })
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: TrainHistory,
    pub adam: AdamState,
}

struct Prepared<'a> {
    sample: &'a Sample,
    x0: Volume,
    mask: Volume,
}

fn prepare(samples: &[Sample], window: Window) -> Result<Vec<Prepared<'_>>> {
    samples
        .iter()
        .map(|s| {
            let x0 = analytic_reconstruct(&s.sinogram, &s.target.grid, window)?;
            let mask = fov_mask(&s.target.grid, &s.sinogram.geom);
            Ok(Prepared { sample: s, x0, mask })
        })
        .collect()
}

fn sample_loss(net: &Network, params: &NetParams, gamma: f64, ode: &OdeConfig, window: Window, s: &Prepared) -> Result<f64> {
    let rec = NodeReconstructor {
        net,
        params,
        gamma,
        cfg: *ode,
        window,
    };
    let sol = rec.solve_from(&s.sample.sinogram, &s.x0, false)?;
    let pred = Volume::from_vec(&s.x0.grid, sol.x_end)?;
    l1_fov_loss(&pred, &s.sample.target, &s.mask)
}

/// Mean validation loss; a diverging sample makes the mean infinite.
fn validation_loss(net: &Network, params: &NetParams, gamma: f64, ode: &OdeConfig, window: Window, set: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        match sample_loss(net, params, gamma, ode, window, s) {
            Ok(l) => total += l,
            Err(Error::Divergence { step, .. }) => {
                log::warn!("validation solve diverged at step {step}");
                return Ok(f64::INFINITY);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(total / set.len() as f64)
}

/// Loss and gradient `(dL/dθ, dL/dγ)` for one sample at an effective γ.
fn sample_gradient(
    net: &Network,
    params: &NetParams,
    gamma: f64,
    ode: &OdeConfig,
    window: Window,
    s: &Prepared,
) -> Result<(f64, Vec<f64>, f64)> {
    let rec = NodeReconstructor {
        net,
        params,
        gamma,
        cfg: *ode,
        window,
    };
    let sol = rec.solve_from(&s.sample.sinogram, &s.x0, false)?;
    let pred = Volume::from_vec(&s.x0.grid, sol.x_end.clone())?;
    let loss = l1_fov_loss(&pred, &s.sample.target, &s.mask)?;
    let seed = l1_fov_grad(&pred, &s.sample.target, &s.mask)?;
    let g = rec.gradients(&s.sample.sinogram, &s.x0, &sol, &seed)?;
    Ok((loss, g.grad_theta, g.grad_gamma))
}

/// Trains `(θ, γ)` from scratch.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    arch: &NetArch,
    ode: &OdeConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_resume(train_set, val_set, arch, ode, cfg, None)
}

/// Trains until `cfg.epochs` epochs are complete, optionally continuing
/// from a saved [`ResumeState`].
pub fn train_resume(
    train_set: &[Sample],
    val_set: &[Sample],
    arch: &NetArch,
    ode: &OdeConfig,
    cfg: &TrainConfig,
    resume: Option<ResumeState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ode.n_steps()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid("training and validation sets must be non-empty"));
    }
    let net = arch.build()?;
    // checkpoints stay relocatable
    let meta_cfg = TrainConfig {
        checkpoint_dir: None,
        ..cfg.clone()
    };
    let train_p = prepare(train_set, cfg.window)?;
    let val_p = prepare(val_set, cfg.window)?;
    let n_theta = net.n_params();

    let (mut params, mut gamma, mut adam, mut history, mut best, start_epoch) = match resume {
        Some(r) => {
            if r.last.meta.arch != *arch {
                return Err(invalid("resume checkpoint architecture differs"));
            }
            let start = r.last.meta.epoch + 1;
            (r.last.params, r.last.meta.gamma, r.adam, r.history, r.best, start)
        }
        None => {
            let params = net.init_params(cfg.seed);
            let gamma = cfg.gamma_init;
            let init_val = validation_loss(&net, &params, gamma, ode, cfg.window, &val_p)?;
            log::info!("initial validation loss {init_val:e}");
            let history = TrainHistory {
                initial_val_loss: init_val,
                epochs: Vec::new(),
            };
            let best = Checkpoint {
                params: params.clone(),
                meta: CheckpointMeta {
                    gamma,
                    epoch: 0,
                    val_loss: f64::INFINITY,
                    arch: *arch,
                    ode: *ode,
                    train: meta_cfg.clone(),
                    seed: cfg.seed,
                    adam_step: 0,
                },
            };
            (params, gamma, AdamState::new(n_theta + 1), history, best, 1)
        }
    };

    let blocks = [(n_theta, cfg.lr_net), (1, cfg.lr_gamma)];
    let mut flat = vec![0.0; n_theta + 1];
    let mut order: Vec<usize> = (0..train_p.len()).collect();
    for epoch in start_epoch..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut updates, mut diverged, mut clipped) = (0.0, 0, 0, 0);
        for &i in &order {
            let s = &train_p[i];
            let attempt = match sample_gradient(&net, &params, gamma, ode, cfg.window, s) {
                Err(Error::Divergence { step, .. }) => {
                    log::warn!("sample {i} diverged at step {step}; retrying at half gamma");
                    sample_gradient(&net, &params, 0.5 * gamma, ode, cfg.window, s)
                        .map(|(l, gt, gg)| (l, gt, 0.5 * gg))
                }
                other => other,
            };
            let (loss, g_theta, g_gamma) = match attempt {
                Ok(v) => v,
                Err(Error::Divergence { step, .. }) => {
                    log::warn!("sample {i} skipped: diverged again at step {step}");
                    diverged += 1;
                    if diverged as f64 > 0.2 * train_p.len() as f64 {
                        return Err(Error::Divergence {
                            step,
                            max_abs: f64::NAN,
                        });
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut grads = g_theta;
            grads.push(g_gamma);
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                log::info!("clipping gradient norm {norm:e} to {}", cfg.clip_norm);
                clipped += 1;
                let k = cfg.clip_norm / norm;
                grads.iter_mut().for_each(|g| *g *= k);
            }
            flat[..n_theta].copy_from_slice(&params.values);
            flat[n_theta] = gamma;
            adam_step(&mut flat, &grads, &mut adam, &cfg.adam, &blocks)?;
            params.values.copy_from_slice(&flat[..n_theta]);
            gamma = flat[n_theta];
            loss_sum += loss;
            updates += 1;
        }
        let val = validation_loss(&net, &params, gamma, ode, cfg.window, &val_p)?;
        let rec = EpochRecord {
            epoch,
            mean_train_loss: if updates > 0 { loss_sum / updates as f64 } else { f64::NAN },
            mean_val_loss: val,
            gamma,
            adam_step: adam.t,
            updates,
            diverged,
            clipped,
        };
        log::info!(
            "epoch {epoch}: train {:e} val {:e} gamma {gamma:e}",
            rec.mean_train_loss,
            val
        );
        history.epochs.push(rec);
        let last = Checkpoint {
            params: params.clone(),
            meta: CheckpointMeta {
                gamma,
                epoch,
                val_loss: val,
                arch: *arch,
                ode: *ode,
                train: meta_cfg.clone(),
                seed: cfg.seed,
                adam_step: adam.t,
            },
        };
        if val < best.meta.val_loss {
            best = last.clone();
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            last.save(dir, "last")?;
            best.save(dir, "best")?;
            serde_json::to_writer(std::fs::File::create(dir.join("adam.json"))?, &adam)?;
            serde_json::to_writer(std::fs::File::create(dir.join("history.json"))?, &history)?;
            history.write_csv(&dir.join("history.csv"))?;
        }
    }
    Ok(TrainOutcome { best, history, adam })
}
