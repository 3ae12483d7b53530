//! Reconstruction as an initial value problem.
//!
//! The dynamics `dx/dt = −λ(γ·Aᵀ(Ax − p) + μ·N_θ(x))` are integrated with
//! classic fixed-step RK4 from an analytic initial volume. Gradients with
//! respect to `x(0)`, `θ` and `γ` come from the adjoint sensitivity method:
//! the augmented state `(x, a, g)` is integrated backward from `T` with the
//! same scheme, recomputing `x(t)` instead of storing the trajectory, so
//! working memory does not grow with the number of steps.

use std::cell::Cell;
use std::io::Write;
use std::ops::{Deref, DerefMut};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytic::{analytic_reconstruct, Window};
use crate::error::{invalid, Error, Result};
use crate::net::{NetParams, Network};
use crate::par::{dot, norm2};
use crate::projector::{back_into, forward_into, Sinogram};
use crate::volume::{Volume, VolumeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub t_end: f64,
    pub step_size: f64,
    pub lambda: f64,
    pub mu: f64,
    /// The regularizer sees `x / net_scale`, so its input is O(1) when
    /// this matches the attenuation range.
    #[serde(default = "unit")]
    pub net_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            t_end: 1.0,
            step_size: 0.05,
            lambda: 1.0,
            mu: 1.0,
            net_scale: 1.0,
        }
    }
}

impl OdeConfig {
    /// Number of fixed steps `S = T / h`.
    pub fn n_steps(&self) -> Result<usize> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid("step_size must be > 0"));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(invalid("t_end must be > 0"));
        }
        let ratio = self.t_end / self.step_size;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 || n < 1.0 {
            return Err(invalid(format!(
                "t_end / step_size = {ratio} is not a positive integer"
            )));
        }
        Ok(n as usize)
    }
}

/// Right-hand side of `dx/dt = f(t, x)` on a flat state vector.
pub trait Dynamics {
    fn state_len(&self) -> usize;

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// `‖Ax − p‖₂` for trajectory logs, when the system has one.
    fn residual_norm(&self, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// Dynamics that can also pull a cotangent back through `f`.
pub trait AdjointDynamics: Dynamics {
    /// Length of the parameter vector gradients are taken with respect to.
    fn param_len(&self) -> usize;

    /// Writes `f(x)`, `(∂f/∂x)ᵀa` and `(∂f/∂p)ᵀa`.
    fn eval_vjp(&self, t: f64, x: &[f64], a: &[f64], f: &mut [f64], fx_a: &mut [f64], fp_a: &mut [f64]) -> Result<()>;
}

/// Closure-backed dynamics, mostly for tests and toy problems.
pub struct FnDynamics<F> {
    pub len: usize,
    pub f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> Dynamics for FnDynamics<F> {
    fn state_len(&self) -> usize {
        self.len
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(t, x, out);
        Ok(())
    }
}

/// Counts live state-sized working buffers of a solve and their peak.
#[derive(Debug, Default)]
pub struct BufferProbe {
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl BufferProbe {
    fn alloc(&self, len: usize) -> Buf<'_> {
        self.live.set(self.live.get() + 1);
        self.peak.set(self.peak.get().max(self.live.get()));
        Buf {
            data: vec![0.0; len],
            probe: self,
        }
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }

    pub fn live(&self) -> usize {
        self.live.get()
    }
}

struct Buf<'a> {
    data: Vec<f64>,
    probe: &'a BufferProbe,
}

impl Drop for Buf<'_> {
    fn drop(&mut self) {
        self.probe.live.set(self.probe.live.get() - 1);
    }
}

impl Deref for Buf<'_> {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Buf<'_> {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub steps: usize,
    pub evaluations: usize,
    /// Peak number of simultaneously live state-sized buffers.
    pub peak_buffers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub t: f64,
    pub x_norm: f64,
    pub f_norm: f64,
    pub residual_norm: Option<f64>,
}

pub fn write_trajectory_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,t,x_norm,f_norm,residual_norm")?;
    for r in log {
        let res = r.residual_norm.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(f, "{},{},{:e},{:e},{}", r.step, r.t, r.x_norm, r.f_norm, res)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub x_end: Vec<f64>,
    pub cfg: OdeConfig,
    pub stats: SolveStats,
    pub log: Vec<StepLog>,
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn check_finite(k: &[f64], x: &[f64], step: usize) -> Result<()> {
    if k.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            max_abs: max_abs(x),
        })
    }
}

/// `out = x + c·k`
#[inline]
fn axpy(out: &mut [f64], x: &[f64], c: f64, k: &[f64]) {
    for ((o, xi), ki) in out.iter_mut().zip(x).zip(k) {
        *o = xi + c * ki;
    }
}

/// `x += c·(k1 + 2k2 + 2k3 + k4)`
#[inline]
fn rk4_combine(x: &mut [f64], c: f64, k1: &[f64], k2: &[f64], k3: &[f64], k4: &[f64]) {
    for i in 0..x.len() {
        x[i] += c * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Integrates `dx/dt = f(t, x)` from 0 to `T` with `S = T/h` classic RK4
/// steps (4 evaluations each).
pub fn rk4_solve<D: Dynamics + ?Sized>(f: &D, x0: &[f64], cfg: &OdeConfig, log: bool) -> Result<Solution> {
    let n_steps = cfg.n_steps()?;
    let n = f.state_len();
    if x0.len() != n {
        return Err(invalid(format!("initial state has {} entries, dynamics expect {n}", x0.len())));
    }
    let h = cfg.step_size;
    let probe = BufferProbe::default();
    let mut x = probe.alloc(n);
    x.copy_from_slice(x0);
    let mut k1 = probe.alloc(n);
    let mut k2 = probe.alloc(n);
    let mut k3 = probe.alloc(n);
    let mut k4 = probe.alloc(n);
    let mut tmp = probe.alloc(n);
    let mut evaluations = 0;
    let mut trajectory = Vec::new();
    for step in 0..n_steps {
        let t = step as f64 * h;
        f.eval(t, &x, &mut k1)?;
        check_finite(&k1, &x, step)?;
        if log {
            trajectory.push(StepLog {
                step,
                t,
                x_norm: norm2(&x),
                f_norm: norm2(&k1),
                residual_norm: f.residual_norm(&x),
            });
        }
        axpy(&mut tmp, &x, 0.5 * h, &k1);
        f.eval(t + 0.5 * h, &tmp, &mut k2)?;
        check_finite(&k2, &x, step)?;
        axpy(&mut tmp, &x, 0.5 * h, &k2);
        f.eval(t + 0.5 * h, &tmp, &mut k3)?;
        check_finite(&k3, &x, step)?;
        axpy(&mut tmp, &x, h, &k3);
        f.eval(t + h, &tmp, &mut k4)?;
        check_finite(&k4, &x, step)?;
        evaluations += 4;
        rk4_combine(&mut x, h / 6.0, &k1, &k2, &k3, &k4);
    }
    if log {
        trajectory.push(StepLog {
            step: n_steps,
            t: n_steps as f64 * h,
            x_norm: norm2(&x),
            f_norm: f64::NAN,
            residual_norm: f.residual_norm(&x),
        });
    }
    let peak_buffers = probe.peak();
    Ok(Solution {
        x_end: x.to_vec(),
        cfg: *cfg,
        stats: SolveStats {
            steps: n_steps,
            evaluations,
            peak_buffers,
        },
        log: trajectory,
    })
}

#[derive(Clone, Debug)]
pub struct AdjointResult {
    /// `dL/dx(0)`.
    pub grad_x0: Vec<f64>,
    /// `dL/dp` for the dynamics' parameter vector.
    pub grad_params: Vec<f64>,
    /// `x(0)` recovered by integrating the dynamics backward from `x(T)`.
    pub x0_recomputed: Vec<f64>,
    pub stats: SolveStats,
}

/// Stage evaluation of the augmented backward system: writes
/// `(f(x), −(∂f/∂x)ᵀa, −(∂f/∂p)ᵀa)`.
fn augmented<D: AdjointDynamics + ?Sized>(
    f: &D,
    t: f64,
    x: &[f64],
    a: &[f64],
    kx: &mut [f64],
    ka: &mut [f64],
    kp: &mut [f64],
    step: usize,
) -> Result<()> {
    f.eval_vjp(t, x, a, kx, ka, kp)?;
    ka.iter_mut().for_each(|v| *v = -*v);
    kp.iter_mut().for_each(|v| *v = -*v);
    check_finite(kx, x, step)?;
    check_finite(ka, a, step)?;
    check_finite(kp, a, step)
}

/// Adjoint sensitivity pass for a loss `L(x(T))`.
///
/// Integrates `dx/dt = f`, `da/dt = −(∂f/∂x)ᵀa`, `dg/dt = −(∂f/∂p)ᵀa` from
/// `t = T` down to 0 with the forward step size, starting from
/// `a(T) = dL/dx(T)` and `g(T) = 0`. Then `a(0) = dL/dx(0)` and
/// `g(0) = dL/dp`.
pub fn adjoint_backward<D: AdjointDynamics + ?Sized>(
    f: &D,
    forward: &Solution,
    dl_dxt: &[f64],
    cfg: &OdeConfig,
) -> Result<AdjointResult> {
    if forward.cfg != *cfg {
        return Err(invalid("adjoint config differs from the forward solve"));
    }
    let n_steps = cfg.n_steps()?;
    let n = f.state_len();
    let np = f.param_len();
    if dl_dxt.len() != n || forward.x_end.len() != n {
        return Err(invalid("adjoint seed or final state has the wrong length"));
    }
    let h = cfg.step_size;
    let probe = BufferProbe::default();
    let mut x = probe.alloc(n);
    x.copy_from_slice(&forward.x_end);
    let mut a = probe.alloc(n);
    a.copy_from_slice(dl_dxt);
    let mut xs = probe.alloc(n);
    let mut as_ = probe.alloc(n);
    let mut kx: [Buf; 4] = std::array::from_fn(|_| probe.alloc(n));
    let mut ka: [Buf; 4] = std::array::from_fn(|_| probe.alloc(n));
    let mut g = vec![0.0; np];
    let mut gs = vec![0.0; np];
    let mut kp: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; np]);
    let mut evaluations = 0;

    for back in 0..n_steps {
        let step = n_steps - 1 - back;
        let t = (step + 1) as f64 * h;
        let [kx1, kx2, kx3, kx4] = &mut kx;
        let [ka1, ka2, ka3, ka4] = &mut ka;
        let [kp1, kp2, kp3, kp4] = &mut kp;
        augmented(f, t, &x, &a, kx1, ka1, kp1, step)?;
        axpy(&mut xs, &x, -0.5 * h, kx1);
        axpy(&mut as_, &a, -0.5 * h, ka1);
        augmented(f, t - 0.5 * h, &xs, &as_, kx2, ka2, kp2, step)?;
        axpy(&mut xs, &x, -0.5 * h, kx2);
        axpy(&mut as_, &a, -0.5 * h, ka2);
        augmented(f, t - 0.5 * h, &xs, &as_, kx3, ka3, kp3, step)?;
        axpy(&mut xs, &x, -h, kx3);
        axpy(&mut as_, &a, -h, ka3);
        augmented(f, t - h, &xs, &as_, kx4, ka4, kp4, step)?;
        evaluations += 4;
        rk4_combine(&mut x, -h / 6.0, kx1, kx2, kx3, kx4);
        rk4_combine(&mut a, -h / 6.0, ka1, ka2, ka3, ka4);
        gs.copy_from_slice(&g);
        rk4_combine(&mut gs, -h / 6.0, kp1, kp2, kp3, kp4);
        std::mem::swap(&mut g, &mut gs);
    }
    let peak_buffers = probe.peak();
    Ok(AdjointResult {
        grad_x0: a.to_vec(),
        grad_params: g,
        x0_recomputed: x.to_vec(),
        stats: SolveStats {
            steps: n_steps,
            evaluations,
            peak_buffers,
        },
    })
}

/// The learned reconstruction dynamics for one measured sinogram.
pub struct CtDynamics<'a> {
    pub grid: &'a VolumeGrid,
    pub p: &'a Sinogram,
    pub net: &'a Network,
    pub params: &'a NetParams,
    pub gamma: f64,
    pub cfg: OdeConfig,
    net_evals: Cell<usize>,
}

impl<'a> CtDynamics<'a> {
    pub fn new(
        grid: &'a VolumeGrid,
        p: &'a Sinogram,
        net: &'a Network,
        params: &'a NetParams,
        gamma: f64,
        cfg: OdeConfig,
    ) -> Result<Self> {
        if p.geom.dims() != grid.dims() {
            return Err(invalid("sinogram geometry and grid dimensionality differ"));
        }
        if p.data.len() != p.geom.n_rays() {
            return Err(invalid("sinogram length does not match geometry"));
        }
        net.check_grid(params, grid)?;
        if !(cfg.net_scale > 0.0 && cfg.net_scale.is_finite()) {
            return Err(invalid("net_scale must be > 0"));
        }
        Ok(Self {
            grid,
            p,
            net,
            params,
            gamma,
            cfg,
            net_evals: Cell::new(0),
        })
    }

    /// Number of regularizer evaluations so far.
    pub fn network_evaluations(&self) -> usize {
        self.net_evals.get()
    }

    fn net_input(&self, x: &[f64]) -> Vec<f64> {
        let inv = 1.0 / self.cfg.net_scale;
        x.iter().map(|v| v * inv).collect()
    }

    /// `Aᵀ(Ax − p)`.
    fn data_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.p.data.len()];
        forward_into(self.grid, x, &self.p.geom, &mut r);
        r.iter_mut().zip(&self.p.data).for_each(|(ri, pi)| *ri -= pi);
        let mut g = vec![0.0; x.len()];
        back_into(self.grid, &r, &self.p.geom, &mut g);
        g
    }
}

impl Dynamics for CtDynamics<'_> {
    fn state_len(&self) -> usize {
        self.grid.len()
    }

    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let dc = self.data_gradient(x);
        let reg = self.net.forward_raw(&self.params.values, self.grid.shape3(), &self.net_input(x));
        self.net_evals.set(self.net_evals.get() + 1);
        let (lam, mu, gamma) = (self.cfg.lambda, self.cfg.mu, self.gamma);
        for ((o, d), r) in out.iter_mut().zip(&dc).zip(&reg) {
            *o = -lam * (gamma * d + mu * r);
        }
        Ok(())
    }

    fn residual_norm(&self, x: &[f64]) -> Option<f64> {
        let mut r = vec![0.0; self.p.data.len()];
        forward_into(self.grid, x, &self.p.geom, &mut r);
        Some(
            r.iter()
                .zip(&self.p.data)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt(),
        )
    }
}

impl AdjointDynamics for CtDynamics<'_> {
    /// `θ` followed by `γ`.
    fn param_len(&self) -> usize {
        self.params.len() + 1
    }

    fn eval_vjp(&self, _t: f64, x: &[f64], a: &[f64], f: &mut [f64], fx_a: &mut [f64], fp_a: &mut [f64]) -> Result<()> {
        let (lam, mu, gamma) = (self.cfg.lambda, self.cfg.mu, self.gamma);
        let dc = self.data_gradient(x);
        let (reg, g_theta, g_x) = self
            .net
            .forward_vjp_raw(&self.params.values, self.grid.shape3(), &self.net_input(x), a);
        let inv = 1.0 / self.cfg.net_scale;
        self.net_evals.set(self.net_evals.get() + 1);
        let mut aa = vec![0.0; self.p.data.len()];
        forward_into(self.grid, a, &self.p.geom, &mut aa);
        let mut ata = vec![0.0; x.len()];
        back_into(self.grid, &aa, &self.p.geom, &mut ata);
        for i in 0..x.len() {
            f[i] = -lam * (gamma * dc[i] + mu * reg[i]);
            fx_a[i] = -lam * (gamma * ata[i] + mu * inv * g_x[i]);
        }
        let np = self.params.len();
        for (o, g) in fp_a[..np].iter_mut().zip(&g_theta) {
            *o = -lam * mu * g;
        }
        fp_a[np] = -lam * dot(&dc, a);
        Ok(())
    }
}

/// `dx/dt` of the learned dynamics at `x`.
pub fn dynamics(
    x: &Volume,
    p: &Sinogram,
    net: &Network,
    params: &NetParams,
    gamma: f64,
    cfg: &OdeConfig,
) -> Result<Volume> {
    let d = CtDynamics::new(&x.grid, p, net, params, gamma, *cfg)?;
    let mut out = vec![0.0; x.data.len()];
    d.eval(0.0, &x.data, &mut out)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            max_abs: max_abs(&x.data),
        });
    }
    Volume::from_vec(&x.grid, out)
}

/// Gradients of a loss on the reconstruction, split by parameter kind.
#[derive(Clone, Debug)]
pub struct NodeGradients {
    pub grad_x0: Volume,
    pub grad_theta: Vec<f64>,
    pub grad_gamma: f64,
    pub x0_recovery_error: f64,
    pub stats: SolveStats,
}

/// Learned reconstruction: analytic initial volume, then RK4 integration
/// of the learned dynamics.
pub struct NodeReconstructor<'a> {
    pub net: &'a Network,
    pub params: &'a NetParams,
    pub gamma: f64,
    pub cfg: OdeConfig,
    pub window: Window,
}

impl NodeReconstructor<'_> {
    pub fn initial_volume(&self, p: &Sinogram, grid: &VolumeGrid) -> Result<Volume> {
        analytic_reconstruct(p, grid, self.window)
    }

    /// Solves from a given initial volume.
    pub fn solve_from(&self, p: &Sinogram, x0: &Volume, log: bool) -> Result<Solution> {
        let d = CtDynamics::new(&x0.grid, p, self.net, self.params, self.gamma, self.cfg)?;
        rk4_solve(&d, &x0.data, &self.cfg, log)
    }

    pub fn reconstruct(&self, p: &Sinogram, grid: &VolumeGrid) -> Result<Volume> {
        let x0 = self.initial_volume(p, grid)?;
        let sol = self.solve_from(p, &x0, false)?;
        Volume::from_vec(grid, sol.x_end)
    }

    /// Adjoint gradients for seed `dl_dxt = dL/dx(T)` of a previous solve.
    pub fn gradients(&self, p: &Sinogram, x0: &Volume, forward: &Solution, dl_dxt: &[f64]) -> Result<NodeGradients> {
        let d = CtDynamics::new(&x0.grid, p, self.net, self.params, self.gamma, self.cfg)?;
        let adj = adjoint_backward(&d, forward, dl_dxt, &self.cfg)?;
        let np = self.params.len();
        let err: f64 = adj
            .x0_recomputed
            .iter()
            .zip(&x0.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let x0n = norm2(&x0.data);
        Ok(NodeGradients {
            grad_x0: Volume::from_vec(&x0.grid, adj.grad_x0)?,
            grad_theta: adj.grad_params[..np].to_vec(),
            grad_gamma: adj.grad_params[np],
            x0_recovery_error: if x0n > 0.0 { err / x0n } else { err },
            stats: adj.stats,
        })
    }
}

/// `x* = x⁰ + ∫₀ᵀ f_θ(x(t), p) dt` with `x⁰` the FBP/FDK volume.
pub fn reconstruct_node(
    p: &Sinogram,
    grid: &VolumeGrid,
    net: &Network,
    params: &NetParams,
    gamma: f64,
    cfg: &OdeConfig,
    window: Window,
) -> Result<Volume> {
    NodeReconstructor {
        net,
        params,
        gamma,
        cfg: *cfg,
        window,
    }
    .reconstruct(p, grid)
}
