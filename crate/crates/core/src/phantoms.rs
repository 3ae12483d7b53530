//! Synthetic phantoms and simulated measurements.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::Geometry;
use crate::projector::{forward_project, Sinogram};
use crate::volume::{Volume, VolumeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    DiskSet,
    #[serde(rename = "shepp_logan_2d")]
    SheppLogan2d,
    #[serde(rename = "nested_shells_3d")]
    NestedShells3d,
    #[serde(rename = "walnut_like_3d")]
    WalnutLike3d,
}

impl std::str::FromStr for PhantomKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown phantom kind '{s}'"))
    }
}

fn default_range() -> (f64, f64) {
    (0.0, 0.06)
}

fn default_voxel() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub size: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// mm⁻¹
    #[serde(default = "default_range")]
    pub value_range: (f64, f64),
    #[serde(default = "default_voxel")]
    pub voxel_size: f64,
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, size: &[usize], seed: u64) -> Self {
        Self {
            kind,
            size: size.to_vec(),
            seed,
            value_range: default_range(),
            voxel_size: 1.0,
        }
    }

    pub fn grid(&self) -> Result<VolumeGrid> {
        VolumeGrid::new(&self.size, self.voxel_size)
    }
}

/// Original Shepp-Logan table: intensity, semi-axes (a, b), center
/// (x0, y0), rotation in degrees. Coordinates normalized to [-1, 1].
pub const SHEPP_LOGAN: [[f64; 6]; 10] = [
    [2.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.98, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.02, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.02, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.01, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.01, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.01, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.01, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.01, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.01, 0.023, 0.046, 0.06, -0.605, 0.0],
];

/// Axis-aligned ellipsoid (or ellipse when the z semi-axis is infinite)
/// with an in-plane rotation.
#[derive(Clone, Copy, Debug)]
struct Blob {
    center: [f64; 3],
    axes: [f64; 3],
    rot: f64,
}

impl Blob {
    fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.rot.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let xr = c * dx + s * dy;
        let yr = -s * dx + c * dy;
        let dz = p[2] - self.center[2];
        (xr / self.axes[0]).powi(2) + (yr / self.axes[1]).powi(2) + (dz / self.axes[2]).powi(2) <= 1.0
    }
}

/// Normalized coordinates of every voxel center (half-extent = 1 along
/// the largest axis).
fn normalized_positions(grid: &VolumeGrid) -> Vec<[f64; 3]> {
    let half = 0.5 * grid.voxel_size * grid.shape.iter().copied().max().unwrap_or(1) as f64;
    let mut out = Vec::with_capacity(grid.len());
    for iz in 0..grid.nz() {
        for iy in 0..grid.ny() {
            for ix in 0..grid.nx() {
                let p = grid.voxel_position(ix, iy, iz);
                out.push([p[0] / half, p[1] / half, p[2] / half]);
            }
        }
    }
    out
}

fn paint(values: &mut [f64], pos: &[[f64; 3]], blob: &Blob, value: f64) {
    for (v, p) in values.iter_mut().zip(pos) {
        if blob.contains(*p) {
            *v = value;
        }
    }
}

fn shepp_logan(grid: &VolumeGrid, range: (f64, f64)) -> Vec<f64> {
    let scale = (range.1 - range.0) / 2.0;
    normalized_positions(grid)
        .iter()
        .map(|p| {
            let mut v = 0.0;
            for e in &SHEPP_LOGAN {
                let b = Blob {
                    center: [e[3], e[4], 0.0],
                    axes: [e[1], e[2], f64::INFINITY],
                    rot: e[5].to_radians(),
                };
                if b.contains([p[0], p[1], 0.0]) {
                    v += e[0];
                }
            }
            range.0 + scale * v
        })
        .collect()
}

fn third_axis(dims: usize, r: f64) -> f64 {
    if dims == 3 {
        r
    } else {
        f64::INFINITY
    }
}

fn disk_set(grid: &VolumeGrid, range: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pos = normalized_positions(grid);
    let dims = grid.dims();
    let span = range.1 - range.0;
    let mut v = vec![range.0; grid.len()];
    let bg_r = rng.random_range(0.7..0.85);
    let bg = Blob {
        center: [0.0; 3],
        axes: [bg_r, bg_r * rng.random_range(0.85..1.0), third_axis(dims, bg_r)],
        rot: rng.random_range(0.0..std::f64::consts::PI),
    };
    paint(&mut v, &pos, &bg, range.0 + span * rng.random_range(0.2..0.45));
    let n = rng.random_range(4..=8);
    for _ in 0..n {
        let r = rng.random_range(0.06..0.22);
        let (rho, phi) = (rng.random_range(0.0..(bg_r - r - 0.05).max(0.0)), rng.random_range(0.0..std::f64::consts::TAU));
        let z = if dims == 3 { rng.random_range(-0.4..0.4) } else { 0.0 };
        let blob = Blob {
            center: [rho * phi.cos(), rho * phi.sin(), z],
            axes: [r, r, third_axis(dims, r)],
            rot: 0.0,
        };
        paint(&mut v, &pos, &blob, range.0 + span * rng.random_range(0.0..1.0));
    }
    v
}

fn nested_shells(grid: &VolumeGrid, range: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pos = normalized_positions(grid);
    let span = range.1 - range.0;
    let mut v = vec![range.0; grid.len()];
    let mut r = [rng.random_range(0.75..0.9), rng.random_range(0.75..0.9), rng.random_range(0.6..0.85)];
    let shells = rng.random_range(3..=5);
    for k in 0..shells {
        let blob = Blob {
            center: [rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), 0.0],
            axes: r,
            rot: rng.random_range(0.0..std::f64::consts::PI),
        };
        let value = if k % 2 == 0 {
            range.0 + span * rng.random_range(0.4..1.0)
        } else {
            range.0 + span * rng.random_range(0.0..0.3)
        };
        paint(&mut v, &pos, &blob, value);
        let shrink = rng.random_range(0.6..0.8);
        r.iter_mut().for_each(|a| *a *= shrink);
    }
    v
}

fn walnut_like(grid: &VolumeGrid, range: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pos = normalized_positions(grid);
    let span = range.1 - range.0;
    let mut v = vec![range.0; grid.len()];
    let outer = [rng.random_range(0.7..0.85), rng.random_range(0.65..0.8), rng.random_range(0.75..0.9)];
    let shell = rng.random_range(0.06..0.1);
    // hull
    paint(&mut v, &pos, &Blob { center: [0.0; 3], axes: outer, rot: 0.0 }, range.0 + span * rng.random_range(0.7..0.95));
    // gap between hull and kernel
    let inner = outer.map(|a| a - shell);
    paint(&mut v, &pos, &Blob { center: [0.0; 3], axes: inner, rot: 0.0 }, range.0);
    // two kernel lobes separated by a thin septum
    let kernel = range.0 + span * rng.random_range(0.3..0.5);
    for side in [-1.0, 1.0] {
        let lobe = Blob {
            center: [side * inner[0] * 0.45, 0.0, 0.0],
            axes: [inner[0] * 0.42, inner[1] * 0.8, inner[2] * 0.85],
            rot: 0.0,
        };
        paint(&mut v, &pos, &lobe, kernel);
    }
    // interior structure
    for _ in 0..rng.random_range(6..12) {
        let r = rng.random_range(0.04..0.12);
        let c = [
            rng.random_range(-0.5..0.5) * inner[0],
            rng.random_range(-0.5..0.5) * inner[1],
            rng.random_range(-0.5..0.5) * inner[2],
        ];
        let blob = Blob {
            center: c,
            axes: [r, r * rng.random_range(0.5..1.0), r],
            rot: rng.random_range(0.0..std::f64::consts::PI),
        };
        paint(&mut v, &pos, &blob, range.0 + span * rng.random_range(0.1..0.7));
    }
    v
}

/// Deterministic phantom for `spec`; all values lie in `spec.value_range`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume> {
    let grid = spec.grid()?;
    let (lo, hi) = spec.value_range;
    if !(hi > lo) {
        return Err(invalid("value_range must be increasing"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let data = match spec.kind {
        PhantomKind::DiskSet => disk_set(&grid, spec.value_range, &mut rng),
        PhantomKind::SheppLogan2d => {
            if grid.dims() != 2 {
                return Err(invalid("shepp_logan_2d needs a 2D size"));
            }
            shepp_logan(&grid, spec.value_range)
        }
        PhantomKind::NestedShells3d | PhantomKind::WalnutLike3d => {
            if grid.dims() != 3 {
                return Err(invalid("3D phantom kinds need a 3D size"));
            }
            if spec.kind == PhantomKind::NestedShells3d {
                nested_shells(&grid, spec.value_range, &mut rng)
            } else {
                walnut_like(&grid, spec.value_range, &mut rng)
            }
        }
    };
    let data = data.into_iter().map(|v| v.clamp(lo, hi)).collect();
    Volume::from_vec(&grid, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    #[default]
    None,
    Gaussian { sigma: f64 },
    /// Photon-counting noise with `i0` incident photons per ray.
    Poisson { i0: f64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(invalid("noise sigma must be >= 0"))
            }
            NoiseModel::Poisson { i0 } if !(i0 > 0.0 && i0.is_finite()) => Err(invalid("noise i0 must be > 0")),
            _ => Ok(()),
        }
    }
}

/// `p = A x + ε`, reproducible from `seed`.
pub fn simulate_measurement(x: &Volume, geom: &Geometry, noise: &NoiseModel, seed: u64) -> Result<Sinogram> {
    noise.validate()?;
    let mut p = forward_project(x, geom)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *noise {
        NoiseModel::None => {}
        NoiseModel::Gaussian { sigma } => {
            if sigma > 0.0 {
                let n = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
                p.data.iter_mut().for_each(|v| *v += n.sample(&mut rng));
            }
        }
        NoiseModel::Poisson { i0 } => {
            for v in p.data.iter_mut() {
                let mean = i0 * (-*v).exp();
                let counts = if mean > 0.0 {
                    Poisson::new(mean).map_err(|e| invalid(e.to_string()))?.sample(&mut rng)
                } else {
                    0.0
                };
                *v = -(counts.max(1.0) / i0).ln();
            }
        }
    }
    Ok(p)
}
