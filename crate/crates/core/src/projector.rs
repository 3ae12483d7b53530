//! Matched forward projector `A` and backprojector `Aᵀ` (Joseph's method).
//!
//! Each ray is sampled once per voxel plane along its dominant axis; the
//! value at the crossing point is linearly (2D) or bilinearly (3D)
//! interpolated from the neighbouring voxel centers and weighted by the
//! path length between planes, `voxel_size / |d_axis|`. Taps that fall
//! outside the grid are dropped. Backprojection reuses the exact same
//! taps, so `⟨Ax, y⟩ = ⟨x, Aᵀy⟩` holds to rounding.

use crate::error::{invalid, Error, Result};
use crate::geometry::{Geometry, Ray};
use crate::par;
use crate::volume::{Volume, VolumeGrid};

/// Line integrals for every ray of a geometry, angle-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub geom: Geometry,
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(geom: &Geometry) -> Self {
        Self {
            data: vec![0.0; geom.n_rays()],
            geom: geom.clone(),
        }
    }

    pub fn from_vec(geom: &Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geom.n_rays() {
            return Err(Error::ShapeMismatch(format!(
                "sinogram has {} values, geometry needs {}",
                data.len(),
                geom.n_rays()
            )));
        }
        Ok(Self { geom: geom.clone(), data })
    }

    /// Detector samples of projection `angle`.
    pub fn projection(&self, angle: usize) -> &[f64] {
        let n = self.geom.detector_len();
        &self.data[angle * n..(angle + 1) * n]
    }
}

/// Backprojection accumulates into at most this many partial volumes, one
/// per contiguous block of angles, summed in block order afterwards.
const BACKPROJECT_BLOCKS: usize = 8;

/// Calls `tap(voxel_index, weight)` for every interpolation tap of `ray`.
#[inline]
pub fn trace<F: FnMut(usize, f64)>(grid: &VolumeGrid, ray: &Ray, mut tap: F) {
    if grid.dims() == 2 {
        trace_2d(grid, ray, &mut tap)
    } else {
        trace_3d(grid, ray, &mut tap)
    }
}

fn trace_2d<F: FnMut(usize, f64)>(grid: &VolumeGrid, ray: &Ray, tap: &mut F) {
    let (o, d) = (ray.origin, ray.direction);
    let drive = if d[0].abs() >= d[1].abs() { 0 } else { 1 };
    let other = 1 - drive;
    let n_drive = grid.shape[drive];
    let n_other = grid.shape[other] as isize;
    let weight = grid.voxel_size / d[drive].abs();
    for i in 0..n_drive {
        let t = (grid.center(drive, i) - o[drive]) / d[drive];
        let f = grid.fractional_index(other, o[other] + t * d[other]);
        if !(f > -1.0 && f < n_other as f64) {
            continue;
        }
        let j0 = f.floor() as isize;
        let w1 = f - j0 as f64;
        let idx = |j: isize| {
            if drive == 0 {
                grid.index(i, j as usize, 0)
            } else {
                grid.index(j as usize, i, 0)
            }
        };
        if j0 >= 0 {
            tap(idx(j0), (1.0 - w1) * weight);
        }
        if j0 + 1 < n_other && w1 > 0.0 {
            tap(idx(j0 + 1), w1 * weight);
        }
    }
}

fn trace_3d<F: FnMut(usize, f64)>(grid: &VolumeGrid, ray: &Ray, tap: &mut F) {
    let (o, d) = (ray.origin, ray.direction);
    let drive = (0..3)
        .max_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()).then(b.cmp(&a)))
        .unwrap_or(0);
    let (b, c) = match drive {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let shape = grid.shape3();
    let (nb, nc) = (shape[b] as isize, shape[c] as isize);
    let weight = grid.voxel_size / d[drive].abs();
    let mut coord = [0usize; 3];
    for i in 0..shape[drive] {
        let t = (grid.center(drive, i) - o[drive]) / d[drive];
        let fb = grid.fractional_index(b, o[b] + t * d[b]);
        let fc = grid.fractional_index(c, o[c] + t * d[c]);
        if !(fb > -1.0 && fb < nb as f64 && fc > -1.0 && fc < nc as f64) {
            continue;
        }
        let (b0, c0) = (fb.floor() as isize, fc.floor() as isize);
        let (wb, wc) = (fb - b0 as f64, fc - c0 as f64);
        coord[drive] = i;
        for (db, fbw) in [(0isize, 1.0 - wb), (1, wb)] {
            let jb = b0 + db;
            if jb < 0 || jb >= nb || fbw == 0.0 {
                continue;
            }
            for (dc, fcw) in [(0isize, 1.0 - wc), (1, wc)] {
                let jc = c0 + dc;
                if jc < 0 || jc >= nc || fcw == 0.0 {
                    continue;
                }
                coord[b] = jb as usize;
                coord[c] = jc as usize;
                tap(grid.index(coord[0], coord[1], coord[2]), fbw * fcw * weight);
            }
        }
    }
}

fn check_compatible(geom: &Geometry, grid: &VolumeGrid) -> Result<()> {
    if geom.dims() != grid.dims() {
        return Err(invalid(format!(
            "{}D geometry cannot project a {}D grid",
            geom.dims(),
            grid.dims()
        )));
    }
    Ok(())
}

/// Computes `A x`.
pub fn forward_project(x: &Volume, geom: &Geometry) -> Result<Sinogram> {
    check_compatible(geom, &x.grid)?;
    let mut out = Sinogram::zeros(geom);
    forward_into(&x.grid, &x.data, geom, &mut out.data);
    Ok(out)
}

/// `out = A x` on raw buffers; shapes are the caller's responsibility.
pub fn forward_into(grid: &VolumeGrid, x: &[f64], geom: &Geometry, out: &mut [f64]) {
    debug_assert_eq!(x.len(), grid.len());
    debug_assert_eq!(out.len(), geom.n_rays());
    let per = geom.detector_len();
    par::for_each_chunk_mut(out, per, |angle, row| {
        for (j, v) in row.iter_mut().enumerate() {
            let ray = geom.ray_at(angle * per + j);
            let mut acc = 0.0;
            trace(grid, &ray, |idx, w| acc += w * x[idx]);
            *v = acc;
        }
    });
}

/// Computes `Aᵀ p` on `grid`.
pub fn back_project(p: &Sinogram, grid: &VolumeGrid) -> Result<Volume> {
    check_compatible(&p.geom, grid)?;
    if p.data.len() != p.geom.n_rays() {
        return Err(invalid("sinogram length does not match its geometry"));
    }
    let mut out = Volume::zeros(grid);
    back_into(grid, &p.data, &p.geom, &mut out.data);
    Ok(out)
}

/// `out = Aᵀ p` on raw buffers.
pub fn back_into(grid: &VolumeGrid, p: &[f64], geom: &Geometry, out: &mut [f64]) {
    debug_assert_eq!(out.len(), grid.len());
    let n_angles = geom.n_angles();
    let per = geom.detector_len();
    let blocks = n_angles.min(BACKPROJECT_BLOCKS);
    let partials = par::map_range(blocks, |b| {
        let (lo, hi) = (b * n_angles / blocks, (b + 1) * n_angles / blocks);
        let mut acc = vec![0.0; grid.len()];
        for flat in lo * per..hi * per {
            let v = p[flat];
            if v == 0.0 {
                continue;
            }
            let ray = geom.ray_at(flat);
            trace(grid, &ray, |idx, w| acc[idx] += w * v);
        }
        acc
    });
    out.iter_mut().for_each(|o| *o = 0.0);
    for part in &partials {
        for (o, v) in out.iter_mut().zip(part) {
            *o += v;
        }
    }
}

/// Power-iteration estimate of the spectral norm `‖A‖₂`.
///
/// Starts from the all-ones volume; for a non-negative `A` that vector is
/// never orthogonal to the leading singular vector. The returned Rayleigh
/// estimate is non-decreasing in `n_power_iters`.
pub fn op_norm_estimate(geom: &Geometry, grid: &VolumeGrid, n_power_iters: usize) -> Result<f64> {
    check_compatible(geom, grid)?;
    if n_power_iters == 0 {
        return Err(invalid("n_power_iters must be >= 1"));
    }
    let mut v = vec![1.0; grid.len()];
    let mut av = vec![0.0; geom.n_rays()];
    let mut estimate = 0.0;
    for _ in 0..n_power_iters {
        let nv = par::norm2(&v);
        if nv == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|e| *e /= nv);
        forward_into(grid, &v, geom, &mut av);
        estimate = par::norm2(&av);
        back_into(grid, &av, geom, &mut v);
    }
    Ok(estimate)
}
